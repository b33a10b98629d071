"""Declarative experiment configuration.

One YAML file drives every stage; every hyperparameter that matters
(loss weights, sharpening strength, architecture sizes, step budgets)
is visible here rather than buried in code. Parsing is strict: unknown
keys are rejected, and validation reports every offending key at once
so a config is fixed in one pass, not key by key.

A resolved copy (all defaults materialized) is written beside every run
output; resolved configs round-trip to themselves.
"""

from __future__ import annotations

import copy
import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .imaging import SharpenParams
from .training import PROFILES, VARIANTS, TrainConfig

ENV_PROFILE = "SHARPMASK_PROFILE"


class ConfigError(ValueError):
    """Raised with every validation problem joined into a single line."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class DatasetSection:
    root: str | None = None  # source frames for real datasets; unused for TOY
    tag: str = "TOY"
    resolution: int = 32
    n_pairs: int = 2000  # synthesized pairs, TOY only
    split_fractions: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    seed: int = 0
    variance_floor: float | None = None


@dataclass
class SharpenSection:
    sigma: float = 1.0
    amount: float = 0.8
    threshold: float = 0.0

    def build(self) -> SharpenParams:
        return SharpenParams(sigma=self.sigma, amount=self.amount, threshold=self.threshold)


@dataclass
class G1Section:
    base_channels: int = 16
    depth: int = 2

    def as_arch(self) -> dict:
        return {"base_channels": self.base_channels, "depth": self.depth}


@dataclass
class G2Section:
    n_blocks: int = 1
    patch_size: int = 2
    embed_dim: int = 48
    base_channels: int = 16

    def as_arch(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class DiscSection:
    base_channels: int = 16
    n_layers: int = 3

    def as_arch(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class DetectorSection:
    name: str = "toy"
    base_channels: int = 16


@dataclass
class ModelSection:
    g1: G1Section = field(default_factory=G1Section)
    g2: G2Section = field(default_factory=G2Section)
    d1: DiscSection = field(default_factory=DiscSection)
    d2: DiscSection = field(default_factory=DiscSection)
    detector: DetectorSection = field(default_factory=DetectorSection)


@dataclass
class TrainSection:
    alpha: float = 100.0
    # At toy scale the VEN reconstruction term needs far more weight than the
    # full-scale setting, or adversarial noise from its near-unwinnable
    # discriminator game drowns the sharpening target.
    beta: float = 2000.0
    learning_rate: float = 4e-4
    detector_learning_rate: float = 2e-3  # plain classifier, tolerates more
    batch_size: int = 32
    steps_fdn: int = 800
    steps_ven: int = 250
    steps_detector: int = 400
    seed: int = 0
    variant: str = "two_stage"
    d_skip_threshold: float = 0.3
    fdn_g1_checkpoint: str | None = None  # needed by train-ven when not using the run layout

    def build(self, profile: str) -> TrainConfig:
        return TrainConfig(
            alpha=self.alpha, beta=self.beta, learning_rate=self.learning_rate,
            batch_size=self.batch_size, steps_fdn=self.steps_fdn,
            steps_ven=self.steps_ven, steps_detector=self.steps_detector,
            seed=self.seed, profile=profile,
            d_skip_threshold=self.d_skip_threshold,
        )


@dataclass
class AttackSection:
    batch_size: int = 32
    resume: bool = True
    fdn_g1_checkpoint: str | None = None
    ven_g2_checkpoint: str | None = None
    manifest: str | None = None  # defaults to the run's test split


@dataclass
class EvalSection:
    threshold: float = 0.5
    face_detector: str = "variance_stub"
    detector_checkpoint: str | None = None
    formats: list = field(default_factory=lambda: ["markdown", "csv", "json"])


@dataclass
class ExperimentConfig:
    profile: str = "TOY"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    sharpen: SharpenSection = field(default_factory=SharpenSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    attack: AttackSection = field(default_factory=AttackSection)
    eval: EvalSection = field(default_factory=EvalSection)


# Larger defaults for runs on real frame corpora. Step budgets and widths
# here are engineering choices sized for GPU training, not toy-calibrated.
_FULL_OVERRIDES = {
    "dataset": {"tag": "CELEB_DF", "resolution": 256, "n_pairs": 0},
    "model": {
        "g1": {"base_channels": 64, "depth": 4},
        "g2": {"n_blocks": 2, "patch_size": 2, "embed_dim": 96, "base_channels": 32},
        "d1": {"base_channels": 64, "n_layers": 3},
        "d2": {"base_channels": 64, "n_layers": 3},
        "detector": {"name": "resnet50", "base_channels": 64},
    },
    # at full scale the adversarial game is better balanced, so the
    # reconstruction weight and step size come back down
    "train": {"batch_size": 8, "steps_fdn": 100000, "steps_ven": 30000,
              "steps_detector": 20000, "beta": 100.0, "learning_rate": 2e-4},
}


_SCALAR_TYPES = {int: "integer", float: "number", str: "string", bool: "boolean"}


def _coerce_scalar(value, annot, default, path, problems):
    # YAML gives ints where floats are annotated; that widening is fine,
    # and everything else must match exactly. On a mismatch the recorded
    # problem is the verdict; the default stands in so later semantic
    # checks don't trip over the bad value.
    if annot is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if annot is int and isinstance(value, bool):
        problems.append(f"{path}: expected integer, got boolean")
        return default
    if not isinstance(value, annot):
        problems.append(f"{path}: expected {_SCALAR_TYPES[annot]}, got {type(value).__name__}")
        return default
    return value


_OPTIONAL_STR = {"root", "fdn_g1_checkpoint", "ven_g2_checkpoint",
                 "manifest", "detector_checkpoint"}


def _build_section(cls, payload: dict, path: str, problems: list):
    if not isinstance(payload, dict):
        problems.append(f"{path}: expected a mapping, got {type(payload).__name__}")
        return cls()
    known = {f.name: f for f in fields(cls)}
    for key in sorted(set(payload) - set(known)):
        problems.append(f"unknown key: {path}.{key}" if path else f"unknown key: {key}")
    kwargs = {}
    for name, f in known.items():
        if name not in payload:
            continue
        value = payload[name]
        sub = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(f.type) or (isinstance(f.type, str) and f.type in _SECTION_CLASSES):
            cls_ = _SECTION_CLASSES[f.type] if isinstance(f.type, str) else f.type
            kwargs[name] = _build_section(cls_, value, sub, problems)
        elif name in ("split_fractions", "formats"):
            if not isinstance(value, (list, tuple)):
                problems.append(f"{sub}: expected a list")
            else:
                kwargs[name] = list(value)
        elif name == "variance_floor":
            if value is not None and not isinstance(value, (int, float)):
                problems.append(f"{sub}: expected number or null")
            else:
                kwargs[name] = None if value is None else float(value)
        elif name in _OPTIONAL_STR:
            if value is not None and not isinstance(value, str):
                problems.append(f"{sub}: expected string or null")
            else:
                kwargs[name] = value
        else:
            default = getattr(cls(), name)
            kwargs[name] = _coerce_scalar(value, type(default), default, sub, problems)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{path or cls.__name__}: {exc}")
        return cls()


_SECTION_CLASSES = {
    "DatasetSection": DatasetSection, "SharpenSection": SharpenSection,
    "G1Section": G1Section, "G2Section": G2Section, "DiscSection": DiscSection,
    "DetectorSection": DetectorSection, "ModelSection": ModelSection,
    "TrainSection": TrainSection, "AttackSection": AttackSection,
    "EvalSection": EvalSection,
}


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def from_dict(payload: dict) -> ExperimentConfig:
    """Build a validated config; raises ConfigError listing every problem."""
    if not isinstance(payload, dict):
        raise ConfigError([f"config root: expected a mapping, got {type(payload).__name__}"])
    problems: list = []
    profile = payload.get("profile", "TOY")
    if profile not in PROFILES:
        problems.append(f"profile: must be one of {list(PROFILES)}, got {profile!r}")
        profile = "TOY"
    if profile == "FULL":
        payload = _deep_merge(copy.deepcopy(_FULL_OVERRIDES), payload)

    cfg = _build_section(ExperimentConfig, payload, "", problems)
    cfg.profile = profile

    from .data import DATASET_TAGS

    if cfg.dataset.tag not in DATASET_TAGS:
        problems.append(f"dataset.tag: must be one of {list(DATASET_TAGS)}, got {cfg.dataset.tag!r}")
    if len(cfg.dataset.split_fractions) != 3:
        problems.append("dataset.split_fractions: expected exactly 3 fractions")
    try:
        cfg.sharpen.build()
    except ValueError as exc:
        problems.append(f"sharpen: {exc}")
    try:
        cfg.train.build(profile)
    except ValueError as exc:
        problems.append(f"train: {exc}")
    if cfg.train.variant not in VARIANTS:
        problems.append(f"train.variant: unknown variant {cfg.train.variant!r}")
    if cfg.attack.batch_size < 1:
        problems.append(f"attack.batch_size: must be >= 1, got {cfg.attack.batch_size}")
    if not 0.0 <= cfg.eval.threshold <= 1.0:
        problems.append(f"eval.threshold: must be in [0, 1], got {cfg.eval.threshold}")

    if problems:
        raise ConfigError(problems)
    return cfg


def to_dict(cfg: ExperimentConfig) -> dict:
    """Fully materialized plain-dict form (what gets written to disk)."""
    return dataclasses.asdict(cfg)


def default_config(profile: str = "TOY") -> ExperimentConfig:
    return from_dict({"profile": profile})


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    payload = yaml.safe_load(text)
    if payload is None:
        payload = {}
    return from_dict(payload)


def parse_override(item: str) -> tuple:
    """Split one 'dotted.key=value' override; value is parsed as YAML.

    Numeric forms are tried first because YAML 1.1 reads scientific
    notation like 4e-4 as a string.
    """
    if "=" not in item:
        raise ConfigError([f"override {item!r}: expected dotted.key=value"])
    key, _, raw = item.partition("=")
    key = key.strip()
    if not key:
        raise ConfigError([f"override {item!r}: empty key"])
    raw_s = raw.strip()
    for cast in (int, float):
        try:
            return key, cast(raw_s)
        except ValueError:
            pass
    try:
        value = yaml.safe_load(raw) if raw_s else ""
    except yaml.YAMLError:
        value = raw
    return key, value


def apply_overrides(payload: dict, overrides) -> dict:
    out = copy.deepcopy(payload)
    for item in overrides:
        key, value = parse_override(item)
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            nxt = node.get(part)
            if not isinstance(nxt, dict):
                nxt = {}
                node[part] = nxt
            node = nxt
        node[parts[-1]] = value
    return out


def resolve(config_path=None, overrides=(), profile_env=None) -> ExperimentConfig:
    """Config file -> overrides -> env profile, validated at the end."""
    payload = {}
    if config_path is not None:
        text = Path(config_path).read_text(encoding="utf-8")
        payload = yaml.safe_load(text) or {}
        if not isinstance(payload, dict):
            raise ConfigError([f"config root: expected a mapping, got {type(payload).__name__}"])
    payload = apply_overrides(payload, overrides)
    env = os.environ.get(ENV_PROFILE) if profile_env is None else profile_env
    if env:
        if env not in PROFILES:
            raise ConfigError([f"{ENV_PROFILE}: must be one of {list(PROFILES)}, got {env!r}"])
        payload["profile"] = env
    return from_dict(payload)


def write_resolved(cfg: ExperimentConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved_config.yaml"
    path.write_text(
        yaml.safe_dump(to_dict(cfg), sort_keys=True, default_flow_style=False),
        encoding="utf-8",
    )
    return path
