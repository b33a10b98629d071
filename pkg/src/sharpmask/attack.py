"""Inference-time attack: fake frames in, anti-forensics outputs out.

attack_fdn writes I_s = G1(I_f); attack_ven writes I_rs = G1(G2(I_f)).
Each output image is paired with its raw float mask (lossless .npy, for
metrics) and a rescaled visualization PNG, since 8-bit export destroys
small perturbations. Runs are deterministic, resumable by manifest line
index, and recorded in <out>/run.json with the checkpoint digests used.

This path never touches detector components: the attack is black-box by
construction.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imaging, models

logger = logging.getLogger(__name__)


@dataclass
class AttackRun:
    stage: str  # "fdn" | "ven"
    checkpoints: dict  # role -> digest
    sharpen_params: dict | None
    out_dir: Path
    records: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "checkpoints": self.checkpoints,
            "sharpen_params": self.sharpen_params,
            "n_images": len(self.records),
            "records": self.records,
            "complete": True,
        }


def _merge_run_json(out_dir: Path, stage: str, payload: dict) -> Path:
    path = out_dir / "run.json"
    existing = {}
    if path.is_file():
        existing = json.loads(path.read_text(encoding="utf-8"))
    existing[stage] = payload
    path.write_text(json.dumps(existing, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def _mask_stats(mask: np.ndarray) -> dict:
    return {
        "min": float(mask.min()),
        "max": float(mask.max()),
        "mean_abs": float(np.mean(np.abs(mask))),
    }


def _resume_valid(out_dir: Path, stage: str, checkpoints: dict) -> bool:
    """Existing outputs count only if the same checkpoints produced them."""
    path = out_dir / "run.json"
    if not path.is_file():
        return False
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
        return payload[stage]["checkpoints"] == checkpoints
    except (ValueError, KeyError):
        return False


def _run_stage(
    forward,
    manifest,
    out_dir: Path,
    stage: str,
    mask_stage: str,
    checkpoints: dict,
    sharpen_dict,
    batch_size: int,
    resume: bool,
) -> AttackRun:
    stage_dir = out_dir / stage
    img_dir = stage_dir / "images"
    mask_dir = stage_dir / "masks"
    img_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)
    resume = resume and _resume_valid(out_dir, stage, checkpoints)
    # stamp the checkpoint identity up front so an interrupted run can be
    # resumed later, but outputs from different checkpoints never survive
    _merge_run_json(out_dir, stage, {"checkpoints": checkpoints,
                                     "sharpen_params": sharpen_dict,
                                     "complete": False})

    run = AttackRun(stage=stage, checkpoints=checkpoints, sharpen_params=sharpen_dict, out_dir=out_dir)
    pending = []
    for idx, sample in enumerate(manifest.samples):
        name = sample.fake_path.stem
        paths = {
            "image": img_dir / f"{name}.png",
            "mask": mask_dir / f"{name}.npy",
            "mask_vis": mask_dir / f"{name}_vis.png",
        }
        done = resume and all(p.is_file() for p in paths.values())
        pending.append((idx, sample, paths, done))

    for lo in range(0, len(pending), batch_size):
        chunk = [entry for entry in pending[lo:lo + batch_size] if not entry[3]]
        if chunk:
            fakes = np.stack([imaging.load_image(s.fake_path, manifest.resolution)
                              for _, s, _, _ in chunk])
            outs = forward(fakes)
            masks = imaging.extract_mask(fakes, outs, mask_stage)
            for k, (_, _, paths, _) in enumerate(chunk):
                imaging.save_image(paths["image"], outs[k])
                np.save(paths["mask"], masks.data[k])
                imaging.save_mask_visualization(
                    paths["mask_vis"], imaging.AdversarialMask(masks.data[k:k + 1], mask_stage))

    for idx, sample, paths, _ in pending:
        mask = np.load(paths["mask"])
        run.records.append({
            "index": idx,
            "id": sample.source_id,
            "image": paths["image"].relative_to(out_dir).as_posix(),
            "mask": paths["mask"].relative_to(out_dir).as_posix(),
            "mask_vis": paths["mask_vis"].relative_to(out_dir).as_posix(),
            "mask_stats": _mask_stats(mask),
        })
    _merge_run_json(out_dir, stage, run.to_dict())
    return run


def attack_fdn(
    g1_checkpoint,
    manifest,
    out_dir,
    batch_size: int = 32,
    sharpen: imaging.SharpenParams | None = None,
    resume: bool = True,
) -> AttackRun:
    """Write I_s and m for every fake frame in the manifest."""
    out_dir = Path(out_dir)
    ckpt = models.load_checkpoint(g1_checkpoint, expected_stage="FDN_G1")
    sharpen_dict = sharpen.to_dict() if sharpen is not None else None
    if not manifest.samples:
        out_dir.mkdir(parents=True, exist_ok=True)
        run = AttackRun("fdn", {"fdn_g1": ckpt.digest}, sharpen_dict, out_dir)
        _merge_run_json(out_dir, "fdn", run.to_dict())
        return run
    g1 = ckpt.build()
    return _run_stage(
        forward=lambda fakes: models.g1_forward(g1, fakes),
        manifest=manifest, out_dir=out_dir, stage="fdn", mask_stage="FDN",
        checkpoints={"fdn_g1": ckpt.digest}, sharpen_dict=sharpen_dict,
        batch_size=batch_size, resume=resume,
    )


def attack_ven(
    ven_g2_checkpoint,
    fdn_g1_checkpoint,
    manifest,
    out_dir,
    batch_size: int = 32,
    sharpen: imaging.SharpenParams | None = None,
    resume: bool = True,
    force: bool = False,
) -> AttackRun:
    """Write I_rs = G1(G2(I_f)) and m' for every fake frame.

    The G1 checkpoint must be the one VEN was trained against; a digest
    mismatch means checkpoint mixing and is refused unless force=True.
    """
    out_dir = Path(out_dir)
    g2_ckpt = models.load_checkpoint(ven_g2_checkpoint, expected_stage="VEN_G2")
    g1_ckpt = models.load_checkpoint(fdn_g1_checkpoint, expected_stage="FDN_G1")

    trained_against = g2_ckpt.metadata.get("fdn_g1_digest")
    if trained_against is not None and trained_against != g1_ckpt.digest:
        msg = (f"checkpoint mixing: VEN was trained against G1 digest "
               f"{trained_against[:12]}..., got {g1_ckpt.digest[:12]}...")
        if not force:
            raise ValueError(msg + " (pass force to proceed)")
        logger.warning("%s; proceeding under force", msg)

    sharpen_dict = sharpen.to_dict() if sharpen is not None else None
    checkpoints = {"ven_g2": g2_ckpt.digest, "fdn_g1": g1_ckpt.digest}
    if not manifest.samples:
        out_dir.mkdir(parents=True, exist_ok=True)
        run = AttackRun("ven", checkpoints, sharpen_dict, out_dir)
        _merge_run_json(out_dir, "ven", run.to_dict())
        return run

    g2 = g2_ckpt.build()
    g1 = g1_ckpt.build()
    return _run_stage(
        forward=lambda fakes: models.g1_forward(g1, models.g2_forward(g2, fakes)),
        manifest=manifest, out_dir=out_dir, stage="ven", mask_stage="VEN",
        checkpoints=checkpoints, sharpen_dict=sharpen_dict,
        batch_size=batch_size, resume=resume,
    )


def load_attack_outputs(out_dir, stage: str) -> dict:
    """Read a finished run back: stacked images, masks, and the records."""
    out_dir = Path(out_dir)
    run = json.loads((out_dir / "run.json").read_text(encoding="utf-8"))[stage]
    images, masks = [], []
    for rec in run["records"]:
        images.append(imaging.load_image(out_dir / rec["image"]))
        masks.append(np.load(out_dir / rec["mask"]))
    return {
        "run": run,
        "images": np.stack(images) if images else np.empty((0,)),
        "masks": np.stack(masks) if masks else np.empty((0,)),
    }
