"""Tests for the feed-forward attack path and its on-disk contract."""

import hashlib
import json
import logging
from pathlib import Path

import numpy as np
import pytest

from sharpmask import attack, data, imaging, models

G1_ARCH = {"base_channels": 8, "depth": 2}
G2_ARCH = {"n_blocks": 1, "patch_size": 2, "embed_dim": 16, "base_channels": 8}


def _tree_digest(root: Path) -> dict:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[p.relative_to(root).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("attack_toy")
    return data.synthesize_toy_dataset(n_pairs=8, resolution=32, seed=11, out_dir=out)


@pytest.fixture(scope="module")
def g1_ckpt(tmp_path_factory):
    import torch
    torch.manual_seed(5)
    g1 = models.GeneratorG1(**G1_ARCH)
    path = tmp_path_factory.mktemp("ckpt") / "fdn_g1.ckpt"
    models.save_checkpoint(path, g1, "FDN_G1", {"step": 0})
    return path


@pytest.fixture(scope="module")
def g2_ckpt(tmp_path_factory, g1_ckpt):
    import torch
    torch.manual_seed(6)
    g2 = models.GeneratorG2(**G2_ARCH)
    g1_digest = models.load_checkpoint(g1_ckpt).digest
    path = tmp_path_factory.mktemp("ckpt") / "ven_g2.ckpt"
    models.save_checkpoint(path, g2, "VEN_G2", {"step": 0, "fdn_g1_digest": g1_digest})
    return path


class TestFdnAttack:
    def test_layout_and_run_record(self, manifest, g1_ckpt, tmp_path):
        run = attack.attack_fdn(g1_ckpt, manifest, tmp_path, batch_size=3)
        assert len(run.records) == 8
        for rec in run.records:
            for key in ("image", "mask", "mask_vis"):
                assert (tmp_path / rec[key]).is_file()
                assert not Path(rec[key]).is_absolute()
        payload = json.loads((tmp_path / "run.json").read_text())
        assert payload["fdn"]["n_images"] == 8
        assert "fdn_g1" in payload["fdn"]["checkpoints"]
        assert [r["index"] for r in payload["fdn"]["records"]] == list(range(8))

    def test_masks_reconstruct_outputs(self, manifest, g1_ckpt, tmp_path):
        attack.attack_fdn(g1_ckpt, manifest, tmp_path, batch_size=8)
        for sample in manifest.samples:
            fake = imaging.load_image(sample.fake_path).astype(np.float64)
            mask = np.load(tmp_path / "fdn" / "masks" / f"{sample.fake_path.stem}.npy")
            emitted = imaging.load_image(
                tmp_path / "fdn" / "images" / f"{sample.fake_path.stem}.png"
            ).astype(np.float64)
            # emitted went through 8-bit quantization, so allow one level
            assert np.abs((fake + mask) - emitted).max() <= 1.0 / 255.0

    def test_perturbation_is_nonzero(self, manifest, g1_ckpt, tmp_path):
        run = attack.attack_fdn(g1_ckpt, manifest, tmp_path)
        mean_abs = [rec["mask_stats"]["mean_abs"] for rec in run.records]
        assert all(v > 0.0 for v in mean_abs)

    def test_rerun_byte_identical(self, manifest, g1_ckpt, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        attack.attack_fdn(g1_ckpt, manifest, a, batch_size=3)
        attack.attack_fdn(g1_ckpt, manifest, b, batch_size=5)
        assert _tree_digest(a) == _tree_digest(b)

    def test_resume_fills_only_missing(self, manifest, g1_ckpt, tmp_path):
        full, partial = tmp_path / "full", tmp_path / "partial"
        attack.attack_fdn(g1_ckpt, manifest, full)
        attack.attack_fdn(g1_ckpt, manifest, partial)
        victims = sorted((partial / "fdn" / "images").glob("*.png"))[:2]
        sentinel_target = victims[0]
        # drop one output entirely, and corrupt another without deleting it
        for stem in (victims[1].stem,):
            (partial / "fdn" / "images" / f"{stem}.png").unlink()
            (partial / "fdn" / "masks" / f"{stem}.npy").unlink()
        sentinel = b"corrupted-on-purpose"
        sentinel_target.write_bytes(sentinel)
        attack.attack_fdn(g1_ckpt, manifest, partial)
        # the missing pair was regenerated with correct bytes
        regenerated = partial / "fdn" / "images" / f"{victims[1].stem}.png"
        assert regenerated.read_bytes() == (full / "fdn" / "images" / f"{victims[1].stem}.png").read_bytes()
        # the intact-looking file was skipped, proving per-line resume
        assert sentinel_target.read_bytes() == sentinel

    def test_changed_checkpoint_invalidates_resume(self, manifest, g1_ckpt, tmp_path):
        import torch
        attack.attack_fdn(g1_ckpt, manifest, tmp_path)
        first = sorted((tmp_path / "fdn" / "images").glob("*.png"))[0].read_bytes()
        torch.manual_seed(99)
        other = models.GeneratorG1(**G1_ARCH)
        other_path = tmp_path / "other_g1.ckpt"
        models.save_checkpoint(other_path, other, "FDN_G1", {"step": 0})
        attack.attack_fdn(other_path, manifest, tmp_path)  # resume default on
        second = sorted((tmp_path / "fdn" / "images").glob("*.png"))[0].read_bytes()
        assert first != second  # stale outputs were regenerated, not kept

    def test_empty_manifest_writes_empty_record(self, g1_ckpt, tmp_path):
        empty = data.Manifest(samples=[], split="TEST", resolution=32, seed=0, dataset_tag="TOY")
        run = attack.attack_fdn(g1_ckpt, empty, tmp_path)
        assert run.records == []
        payload = json.loads((tmp_path / "run.json").read_text())
        assert payload["fdn"]["records"] == []

    def test_wrong_stage_checkpoint_refused(self, manifest, g2_ckpt, tmp_path):
        with pytest.raises(ValueError, match="stage tag"):
            attack.attack_fdn(g2_ckpt, manifest, tmp_path)


class TestVenAttack:
    def test_identity_g2_matches_fdn_attack(self, manifest, g1_ckpt, g2_ckpt, tmp_path):
        # freshly initialized G2 is the exact identity, so the VEN attack
        # must emit bit-identical images to the FDN attack
        fdn_out, ven_out = tmp_path / "fdn_run", tmp_path / "ven_run"
        attack.attack_fdn(g1_ckpt, manifest, fdn_out)
        attack.attack_ven(g2_ckpt, g1_ckpt, manifest, ven_out)
        for sample in manifest.samples:
            name = f"{sample.fake_path.stem}.png"
            a = (fdn_out / "fdn" / "images" / name).read_bytes()
            b = (ven_out / "ven" / "images" / name).read_bytes()
            assert a == b

    def test_run_record_lists_both_digests(self, manifest, g1_ckpt, g2_ckpt, tmp_path):
        run = attack.attack_ven(g2_ckpt, g1_ckpt, manifest, tmp_path)
        assert set(run.checkpoints) == {"ven_g2", "fdn_g1"}
        payload = json.loads((tmp_path / "run.json").read_text())
        assert payload["ven"]["checkpoints"]["fdn_g1"] == models.load_checkpoint(g1_ckpt).digest

    def test_checkpoint_mixing_refused(self, manifest, g1_ckpt, g2_ckpt, tmp_path):
        import torch
        torch.manual_seed(7)
        other_g1 = models.GeneratorG1(**G1_ARCH)
        other_path = tmp_path / "other_g1.ckpt"
        models.save_checkpoint(other_path, other_g1, "FDN_G1", {"step": 0})
        with pytest.raises(ValueError, match="checkpoint mixing"):
            attack.attack_ven(g2_ckpt, other_path, manifest, tmp_path / "out")

    def test_force_overrides_mixing_with_warning(self, manifest, g1_ckpt, g2_ckpt, tmp_path, caplog):
        import torch
        torch.manual_seed(8)
        other_g1 = models.GeneratorG1(**G1_ARCH)
        other_path = tmp_path / "other_g1.ckpt"
        models.save_checkpoint(other_path, other_g1, "FDN_G1", {"step": 0})
        with caplog.at_level(logging.WARNING, logger="sharpmask.attack"):
            run = attack.attack_ven(g2_ckpt, other_path, manifest, tmp_path / "out", force=True)
        assert len(run.records) == 8
        assert any("checkpoint mixing" in r.message for r in caplog.records)

    def test_swapped_checkpoints_refused(self, manifest, g1_ckpt, g2_ckpt, tmp_path):
        with pytest.raises(ValueError, match="stage tag"):
            attack.attack_ven(g1_ckpt, g2_ckpt, manifest, tmp_path)

    def test_shared_run_json_keeps_both_stages(self, manifest, g1_ckpt, g2_ckpt, tmp_path):
        attack.attack_fdn(g1_ckpt, manifest, tmp_path)
        attack.attack_ven(g2_ckpt, g1_ckpt, manifest, tmp_path)
        payload = json.loads((tmp_path / "run.json").read_text())
        assert set(payload) == {"fdn", "ven"}

    def test_load_attack_outputs_round_trip(self, manifest, g1_ckpt, g2_ckpt, tmp_path):
        attack.attack_ven(g2_ckpt, g1_ckpt, manifest, tmp_path)
        loaded = attack.load_attack_outputs(tmp_path, "ven")
        assert loaded["images"].shape == (8, 3, 32, 32)
        assert loaded["masks"].shape == (8, 3, 32, 32)
        assert loaded["run"]["n_images"] == 8
