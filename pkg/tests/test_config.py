"""Tests for config parsing: strictness, profiles, overrides, round-trips."""

import copy

import pytest
import yaml

from sharpmask import config


class TestDefaults:
    def test_toy_defaults(self):
        cfg = config.default_config()
        assert cfg.profile == "TOY"
        assert cfg.dataset.tag == "TOY"
        assert cfg.dataset.resolution == 32
        assert cfg.train.alpha == 100.0 and cfg.train.beta == 2000.0
        assert cfg.sharpen.amount == 0.8

    def test_full_profile_swaps_defaults(self):
        cfg = config.default_config("FULL")
        assert cfg.dataset.resolution == 256
        assert cfg.model.g1.base_channels == 64
        assert cfg.train.steps_fdn == 100000
        assert cfg.train.beta == 100.0 and cfg.train.learning_rate == 2e-4
        assert cfg.model.detector.name == "resnet50"

    def test_explicit_key_beats_profile_default(self):
        cfg = config.from_dict({"profile": "FULL", "train": {"steps_fdn": 5}})
        assert cfg.train.steps_fdn == 5
        assert cfg.train.steps_ven == 30000  # untouched FULL default

    def test_unknown_profile_rejected(self):
        with pytest.raises(config.ConfigError, match="profile"):
            config.from_dict({"profile": "HUGE"})


class TestStrictness:
    def test_all_problems_reported_at_once(self):
        payload = {
            "nope": 1,
            "dataset": {"bogus": 2, "tag": "MYSTERY"},
            "train": {"alhpa": 3, "steps_fdn": 0},
            "sharpen": {"sigma": -1.0},
        }
        with pytest.raises(config.ConfigError) as exc:
            config.from_dict(payload)
        msg = str(exc.value)
        for fragment in ("unknown key: nope", "unknown key: dataset.bogus",
                         "unknown key: train.alhpa", "dataset.tag", "train:",
                         "sharpen:"):
            assert fragment in msg
        assert "\n" not in msg  # single line, machine-parsable

    def test_type_errors_named(self):
        with pytest.raises(config.ConfigError, match="train.alpha: expected number"):
            config.from_dict({"train": {"alpha": "lots"}})

    def test_bool_field_rejects_int(self):
        with pytest.raises(config.ConfigError, match="attack.resume: expected boolean"):
            config.from_dict({"attack": {"resume": 1}})

    def test_threshold_range(self):
        with pytest.raises(config.ConfigError, match="eval.threshold"):
            config.from_dict({"eval": {"threshold": 1.5}})

    def test_split_fractions_arity(self):
        with pytest.raises(config.ConfigError, match="split_fractions"):
            config.from_dict({"dataset": {"split_fractions": [0.5, 0.5]}})

    def test_int_widens_to_float(self):
        cfg = config.from_dict({"train": {"alpha": 50}})
        assert cfg.train.alpha == 50.0 and isinstance(cfg.train.alpha, float)


class TestOverrides:
    def test_parse_forms(self):
        assert config.parse_override("train.alpha=50") == ("train.alpha", 50)
        assert config.parse_override("dataset.tag=FFPP") == ("dataset.tag", "FFPP")
        assert config.parse_override("attack.resume=false") == ("attack.resume", False)
        assert config.parse_override("dataset.variance_floor=null") == (
            "dataset.variance_floor", None)

    def test_scientific_notation_is_numeric(self):
        key, value = config.parse_override("train.learning_rate=4e-4")
        assert value == pytest.approx(4e-4) and isinstance(value, float)

    def test_missing_equals_rejected(self):
        with pytest.raises(config.ConfigError, match="dotted.key=value"):
            config.parse_override("train.alpha")

    def test_apply_does_not_mutate_input(self):
        payload = {"train": {"alpha": 1.0}}
        snapshot = copy.deepcopy(payload)
        config.apply_overrides(payload, ["train.alpha=2", "dataset.seed=9"])
        assert payload == snapshot

    def test_resolve_records_override(self, tmp_path):
        cfg = config.resolve(None, ["train.alpha=50"], profile_env="")
        assert cfg.train.alpha == 50.0

    def test_unknown_override_key_rejected(self):
        with pytest.raises(config.ConfigError, match="unknown key: train.alhpa"):
            config.resolve(None, ["train.alhpa=50"], profile_env="")


class TestEnvProfile:
    def test_env_forces_profile(self, monkeypatch):
        monkeypatch.setenv(config.ENV_PROFILE, "TOY")
        cfg = config.resolve(None, ["profile=FULL"])
        assert cfg.profile == "TOY"

    def test_bad_env_value_rejected(self, monkeypatch):
        monkeypatch.setenv(config.ENV_PROFILE, "TURBO")
        with pytest.raises(config.ConfigError, match="SHARPMASK_PROFILE"):
            config.resolve(None, [])

    def test_explicit_pin_beats_env(self, monkeypatch):
        monkeypatch.setenv(config.ENV_PROFILE, "FULL")
        cfg = config.resolve(None, [], profile_env="TOY")
        assert cfg.profile == "TOY"


class TestRoundTrip:
    @pytest.mark.parametrize("profile", ["TOY", "FULL"])
    def test_resolved_config_reparses_identically(self, tmp_path, profile):
        cfg = config.default_config(profile)
        path = config.write_resolved(cfg, tmp_path)
        reloaded = config.load_config(path)
        assert config.to_dict(reloaded) == config.to_dict(cfg)

    def test_resolved_write_is_deterministic(self, tmp_path):
        cfg = config.from_dict({"train": {"alpha": 37.5}, "dataset": {"seed": 4}})
        a = config.write_resolved(cfg, tmp_path / "a").read_bytes()
        b = config.write_resolved(cfg, tmp_path / "b").read_bytes()
        assert a == b

    def test_yaml_file_load(self, tmp_path):
        path = tmp_path / "exp.yaml"
        path.write_text(yaml.safe_dump({"train": {"beta": 12.5}}), encoding="utf-8")
        cfg = config.load_config(path)
        assert cfg.train.beta == 12.5

    def test_empty_yaml_is_defaults(self, tmp_path):
        path = tmp_path / "empty.yaml"
        path.write_text("", encoding="utf-8")
        cfg = config.load_config(path)
        assert config.to_dict(cfg) == config.to_dict(config.default_config())
