"""Manifest building, toy corpus generation, and batch iteration."""

import hashlib
import json
import logging
from pathlib import Path

import numpy as np
import pytest

from sharpmask import data, imaging


def _write_png(path: Path, seed: int, res: int = 16):
    rng = np.random.default_rng(seed)
    imaging.save_image(path, rng.random((3, res, res)))


def _make_tree(root: Path, sources: int, frames_per_source: int = 2, res: int = 16):
    (root / "real").mkdir(parents=True)
    (root / "fake").mkdir(parents=True)
    k = 0
    for s in range(sources):
        for f in range(frames_per_source):
            name = f"vid{s:03d}_{f:04d}.png"
            _write_png(root / "real" / name, seed=1000 + k, res=res)
            _write_png(root / "fake" / name, seed=5000 + k, res=res)
            k += 1


def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestSourceId:
    def test_frame_suffix_stripped(self):
        assert data.source_id_of("vid003_0017.png") == "vid003"

    def test_plain_stem_kept(self):
        assert data.source_id_of("src00042.png") == "src00042"

    def test_non_numeric_suffix_kept(self):
        assert data.source_id_of("clip_a.png") == "clip_a"


class TestBuildManifests:
    def test_ten_sources_eight_one_one(self, tmp_path):
        _make_tree(tmp_path, sources=10)
        train, val, test = data.build_manifests(tmp_path, "FFPP", (0.8, 0.1, 0.1), seed=7)
        assert (len(train.source_ids()), len(val.source_ids()), len(test.source_ids())) == (8, 1, 1)
        assert len(train) + len(val) + len(test) == 20

    def test_splits_disjoint_by_source(self, tmp_path):
        _make_tree(tmp_path, sources=12, frames_per_source=3)
        train, val, test = data.build_manifests(tmp_path, "CELEB_DF", (0.6, 0.2, 0.2), seed=3)
        assert not train.source_ids() & val.source_ids()
        assert not train.source_ids() & test.source_ids()
        assert not val.source_ids() & test.source_ids()

    def test_rerun_byte_identical(self, tmp_path):
        _make_tree(tmp_path, sources=9)
        outs = []
        for run in ("a", "b"):
            manifests = data.build_manifests(tmp_path, "DEEPER", (0.7, 0.2, 0.1), seed=11)
            d = tmp_path / run
            d.mkdir()
            for m in manifests:
                m.save(d / f"{m.split.lower()}.jsonl")
            outs.append(_tree_digest(d))
        assert outs[0] == outs[1]

    def test_all_train_boundary(self, tmp_path):
        _make_tree(tmp_path, sources=5)
        train, val, test = data.build_manifests(tmp_path, "FFPP", (1.0, 0.0, 0.0), seed=1)
        assert len(train) == 10 and len(val) == 0 and len(test) == 0

    def test_unmatched_skipped_with_warning(self, tmp_path, caplog):
        _make_tree(tmp_path, sources=4)
        _write_png(tmp_path / "real" / "vid999_0000.png", seed=9)
        _write_png(tmp_path / "fake" / "vid888_0000.png", seed=8)
        with caplog.at_level(logging.WARNING, logger="sharpmask.data"):
            train, val, test = data.build_manifests(tmp_path, "FFPP", (1.0, 0.0, 0.0), seed=1)
        assert len(train) == 8
        assert any("2 unmatched" in r.message for r in caplog.records)

    def test_empty_is_error(self, tmp_path):
        (tmp_path / "real").mkdir()
        (tmp_path / "fake").mkdir()
        with pytest.raises(ValueError, match="no usable"):
            data.build_manifests(tmp_path, "FFPP", (0.8, 0.1, 0.1), seed=1)

    def test_missing_subtree_is_error(self, tmp_path):
        (tmp_path / "real").mkdir()
        with pytest.raises(FileNotFoundError):
            data.build_manifests(tmp_path, "FFPP", (0.8, 0.1, 0.1), seed=1)

    def test_bad_fractions_rejected(self, tmp_path):
        _make_tree(tmp_path, sources=2)
        with pytest.raises(ValueError, match="sum to 1"):
            data.build_manifests(tmp_path, "FFPP", (0.5, 0.1, 0.1), seed=1)

    def test_fraction_rounding_within_one(self, tmp_path):
        _make_tree(tmp_path, sources=7, frames_per_source=1)
        train, val, test = data.build_manifests(tmp_path, "FFPP", (0.8, 0.1, 0.1), seed=2)
        counts = [len(m.source_ids()) for m in (train, val, test)]
        assert sum(counts) == 7
        for got, frac in zip(counts, (0.8, 0.1, 0.1)):
            assert abs(got - frac * 7) <= 1

    def test_variance_floor_drops_flat_frames(self, tmp_path, caplog):
        _make_tree(tmp_path, sources=3, frames_per_source=1)
        flat = np.full((3, 16, 16), 0.5)
        imaging.save_image(tmp_path / "real" / "vid900_0000.png", flat)
        imaging.save_image(tmp_path / "fake" / "vid900_0000.png", flat)
        with caplog.at_level(logging.WARNING, logger="sharpmask.data"):
            train, _, _ = data.build_manifests(
                tmp_path, "FFPP", (1.0, 0.0, 0.0), seed=1, variance_floor=1e-4
            )
        assert "vid900" not in {s.source_id for s in train.samples}
        assert len(train) == 3

    def test_save_load_round_trip(self, tmp_path):
        _make_tree(tmp_path, sources=4)
        train, _, _ = data.build_manifests(tmp_path, "FFPP", (1.0, 0.0, 0.0), seed=5)
        p = train.save(tmp_path / "train.jsonl")
        back = data.load_manifest(p)
        assert back.split == "TRAIN" and back.resolution == 16 and back.seed == 5
        assert [(s.real_path.resolve(), s.fake_path.resolve()) for s in back.samples] == [
            (s.real_path.resolve(), s.fake_path.resolve()) for s in train.samples
        ]

    def test_manifest_paths_relative(self, tmp_path):
        _make_tree(tmp_path, sources=2)
        train, _, _ = data.build_manifests(tmp_path, "FFPP", (1.0, 0.0, 0.0), seed=5)
        p = train.save(tmp_path / "train.jsonl")
        rec = json.loads(p.read_text().splitlines()[0])
        assert not rec["real"].startswith("/")


class TestToyDataset:
    def test_single_pair_counts(self, tmp_path):
        m = data.synthesize_toy_dataset(1, 32, seed=0, out_dir=tmp_path)
        pngs = list(tmp_path.rglob("*.png"))
        assert len(pngs) == 2
        assert len((tmp_path / "manifest.jsonl").read_text().splitlines()) == 1
        assert len(m) == 1

    def test_fixed_seed_byte_identical(self, tmp_path):
        digests = []
        for run in ("a", "b"):
            d = tmp_path / run
            data.synthesize_toy_dataset(6, 32, seed=42, out_dir=d)
            digests.append(_tree_digest(d))
        assert digests[0] == digests[1]

    def test_different_seed_differs(self, tmp_path):
        data.synthesize_toy_dataset(3, 32, seed=1, out_dir=tmp_path / "a")
        data.synthesize_toy_dataset(3, 32, seed=2, out_dir=tmp_path / "b")
        assert _tree_digest(tmp_path / "a") != _tree_digest(tmp_path / "b")

    def test_images_decode_at_resolution(self, tmp_path):
        m = data.synthesize_toy_dataset(2, 64, seed=3, out_dir=tmp_path)
        for s in m.samples:
            r = imaging.load_image(s.real_path, expected_size=64)
            f = imaging.load_image(s.fake_path, expected_size=64)
            assert r.shape == f.shape == (3, 64, 64)
            assert not np.array_equal(r, f)

    def test_bad_resolution_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="resolution"):
            data.synthesize_toy_dataset(1, 48, seed=0, out_dir=tmp_path)

    def test_bad_n_pairs_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="n_pairs"):
            data.synthesize_toy_dataset(0, 32, seed=0, out_dir=tmp_path)

    def test_fakes_locally_smoother_on_average(self, tmp_path):
        # the blur patch removes high-frequency texture; check the family
        # statistic rather than any single pair
        m = data.synthesize_toy_dataset(40, 32, seed=7, out_dir=tmp_path)
        diffs = []
        for s in m.samples:
            r = imaging.load_image(s.real_path).astype(np.float64)
            f = imaging.load_image(s.fake_path).astype(np.float64)
            hf_r = np.var(r - imaging.gaussian_blur(r[None], 1.0)[0])
            hf_f = np.var(f - imaging.gaussian_blur(f[None], 1.0)[0])
            diffs.append(hf_r - hf_f)
        assert np.mean(diffs) > 0


class TestBatchIterator:
    def _manifest(self, tmp_path, n=10):
        return data.synthesize_toy_dataset(n, 32, seed=5, out_dir=tmp_path)

    def test_partial_final_batch(self, tmp_path):
        m = self._manifest(tmp_path, 10)
        sizes = [r.shape[0] for r, _ in data.batch_iterator(m, 4, shuffle_seed=0)]
        assert sizes == [4, 4, 2]

    def test_epoch_covers_each_sample_once(self, tmp_path):
        m = self._manifest(tmp_path, 10)
        it = data.batch_iterator(m, 3, shuffle_seed=9)
        seen = []
        ref = {s.source_id: imaging.load_image(s.real_path) for s in m.samples}
        for reals, fakes in it:
            assert reals.shape == fakes.shape
            for img in reals:
                matches = [sid for sid, arr in ref.items() if np.array_equal(arr, img)]
                assert len(matches) == 1
                seen.append(matches[0])
        assert sorted(seen) == sorted(ref)

    def test_fixed_seed_identical_order(self, tmp_path):
        m = self._manifest(tmp_path, 8)
        a = [r for r, _ in data.batch_iterator(m, 4, shuffle_seed=3)]
        b = [r for r, _ in data.batch_iterator(m, 4, shuffle_seed=3)]
        assert all(np.array_equal(x, y) for x, y in zip(a, b)) and len(a) == len(b)

    def test_epochs_reshuffle_but_rerun_matches(self, tmp_path):
        m = self._manifest(tmp_path, 12)
        it1 = data.batch_iterator(m, 12, shuffle_seed=1)
        e1 = [r for r, _ in it1][0]
        e2 = [r for r, _ in it1][0]
        assert not np.array_equal(e1, e2)
        it2 = data.batch_iterator(m, 12, shuffle_seed=1)
        assert np.array_equal(e1, [r for r, _ in it2][0])

    def test_decode_failure_skipped_and_counted(self, tmp_path, caplog):
        m = self._manifest(tmp_path, 6)
        m.samples[2].fake_path.write_bytes(b"not a png")
        it = data.batch_iterator(m, 4, shuffle_seed=None)
        with caplog.at_level(logging.WARNING, logger="sharpmask.data"):
            batches = list(it)
        assert sum(r.shape[0] for r, _ in batches) == 5
        assert it.skipped_last_epoch == 1

    def test_bad_augment_rejected(self, tmp_path):
        m = self._manifest(tmp_path, 2)
        with pytest.raises(ValueError, match="augment"):
            data.batch_iterator(m, 2, augment="flip")

    def test_pairs_stay_aligned_under_shuffle(self, tmp_path):
        m = self._manifest(tmp_path, 6)
        pair_of = {
            imaging.load_image(s.real_path).tobytes(): imaging.load_image(s.fake_path).tobytes()
            for s in m.samples
        }
        for reals, fakes in data.batch_iterator(m, 4, shuffle_seed=2):
            for r, f in zip(reals, fakes):
                assert pair_of[r.tobytes()] == f.tobytes()
