"""Losses and the two training stages.

The generator objective is the non-saturating form mean(-log D(fake))
plus a weighted per-element L1 reconstruction term; discriminators train
on binary cross-entropy. Scores are clamped at 1e-7 before any log so a
saturated discriminator yields a large finite loss instead of inf.

FDN alternates one D1 and one G1 update per batch, pulling I_s toward
sharpened real frames. VEN loads the trained G1, freezes it (gradients
still flow through to G2), and pulls I_rs = G1(G2(I_f)) toward sharpened
fakes. Sharpening targets are computed on the fly from sharpen_params.

This stage never touches detector components; undetectability comes from
matching the sharpened-image distribution, not from detector gradients.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data, imaging, models

PROFILES = ("TOY", "FULL")
VARIANTS = ("two_stage", "single_gan", "g1_first")

_SCORE_EPS = 1e-7


@dataclass
class TrainConfig:
    alpha: float = 100.0
    beta: float = 100.0
    learning_rate: float = 2e-4
    batch_size: int = 32
    steps_fdn: int = 800
    steps_ven: int = 250
    steps_detector: int = 400
    seed: int = 0
    profile: str = "TOY"
    # balance guard: skip the discriminator's optimizer step while its loss
    # is already below this, so an easy discriminator cannot saturate and
    # swamp the generator's L1 anchor with huge -log D gradients. 0 disables.
    d_skip_threshold: float = 0.3

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError(f"alpha and beta must be > 0, got {self.alpha}, {self.beta}")
        for name in ("steps_fdn", "steps_ven", "steps_detector"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.d_skip_threshold < 0:
            raise ValueError(f"d_skip_threshold must be >= 0, got {self.d_skip_threshold}")
        if self.profile not in PROFILES:
            raise ValueError(f"profile must be one of {PROFILES}, got {self.profile!r}")


@dataclass
class LossBreakdown:
    gan_term: float
    recon_term: float
    total: float
    step: int = -1
    tensor: object = field(default=None, repr=False, compare=False)  # differentiable total

    def record(self, stage: str, d_loss: float) -> dict:
        return {
            "step": self.step,
            "stage": stage,
            "gan_term": self.gan_term,
            "recon_term": self.recon_term,
            "total": self.total,
            "d_loss": d_loss,
        }


def _check_scores(scores: torch.Tensor, name: str) -> torch.Tensor:
    # reject wrong squashing; exact 0/1 from saturation is handled by the clamp
    if ((scores < 0) | (scores > 1)).any():
        raise ValueError(f"{name} outside [0, 1]; discriminator must apply sigmoid squashing")
    return scores.clamp(_SCORE_EPS, 1.0 - _SCORE_EPS)


def _generator_breakdown(scores, out_img, target_img, weight: float, step: int) -> LossBreakdown:
    s = _check_scores(scores, "scores")
    if out_img.shape != target_img.shape:
        raise ValueError(f"shape mismatch: {tuple(out_img.shape)} vs {tuple(target_img.shape)}")
    gan = (-torch.log(s)).mean()
    recon = (out_img - target_img).abs().mean()
    weight = float(weight)
    total_t = gan + weight * recon
    gan_f, recon_f = float(gan.detach()), float(recon.detach())
    # breakdown floats satisfy total == gan + weight*recon exactly by construction
    return LossBreakdown(gan_term=gan_f, recon_term=recon_f,
                         total=gan_f + weight * recon_f, step=step, tensor=total_t)


def loss_g1(d1_scores_fake_pair, i_s, i_ru, alpha: float, step: int = -1) -> LossBreakdown:
    """Generator objective for FDN: fool D1 while matching sharpened reals."""
    return _generator_breakdown(d1_scores_fake_pair, i_s, i_ru, alpha, step)


def loss_g2(d2_scores, i_rs, i_fu, beta: float, step: int = -1) -> LossBreakdown:
    """Generator objective for VEN: fool D2 while matching sharpened fakes."""
    return _generator_breakdown(d2_scores, i_rs, i_fu, beta, step)


def _discriminator_loss(scores_fake, scores_real) -> torch.Tensor:
    sf = _check_scores(scores_fake, "scores_fake")
    sr = _check_scores(scores_real, "scores_real")
    return (-torch.log(sr)).mean() + (-torch.log(1.0 - sf)).mean()


def loss_d1(scores_fake_pair, scores_real_pair) -> torch.Tensor:
    """D1 BCE: real exemplars are (I_f concat I_ru) pairs, fakes (I_f concat I_s)."""
    return _discriminator_loss(scores_fake_pair, scores_real_pair)


def loss_d2(scores_fake, scores_sharp_real_target) -> torch.Tensor:
    """D2 BCE: the 'real' class is the sharpened-fake batch I_fu."""
    return _discriminator_loss(scores_fake, scores_sharp_real_target)


# ---------------------------------------------------------------------------
# shared loop helpers


def _usm_tensor(batch_np: np.ndarray, sharpen: imaging.SharpenParams) -> torch.Tensor:
    sharp = imaging.unsharp_mask(batch_np, sharpen)
    return torch.from_numpy(sharp.astype(np.float32))


def _abort_if_nonfinite(value: float, step: int, term: str, module) -> None:
    if math.isfinite(value):
        return
    grad_sq = 0.0
    for p in module.parameters():
        if p.grad is not None:
            grad_sq += float(p.grad.detach().pow(2).sum())
    raise RuntimeError(
        f"non-finite loss at step {step}: {term}={value}, grad_norm={math.sqrt(grad_sq):.6g}"
    )


class _HistoryWriter:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", encoding="utf-8")

    def write(self, rec: dict) -> None:
        self._fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def close(self) -> None:
        self._fh.close()


def _sample_grid(path, rows: list) -> None:
    """Stack [B,3,H,W] arrays into a row-per-family grid image."""
    tiles = [np.concatenate(list(np.clip(r[:8], 0.0, 1.0)), axis=2) for r in rows]
    imaging.save_image(path, np.concatenate(tiles, axis=1))


def _mask_vis(masks: np.ndarray) -> np.ndarray:
    lo, hi = float(masks.min()), float(masks.max())
    if hi == lo:
        return np.full_like(masks, 0.5)
    return (masks - lo) / (hi - lo)


def _batches(manifest, cfg: TrainConfig, steps: int):
    it = data.batch_iterator(manifest, cfg.batch_size, shuffle_seed=cfg.seed)
    step = 0
    while step < steps:
        for reals, fakes in it:
            if step >= steps:
                return
            yield step, reals, fakes
            step += 1


# ---------------------------------------------------------------------------
# FDN


def train_fdn(
    cfg: TrainConfig,
    manifest,
    sharpen: imaging.SharpenParams,
    out_dir,
    g1_arch: dict | None = None,
    d1_arch: dict | None = None,
    variant: str = "two_stage",
    sample_every: int | None = None,
) -> dict:
    """First stage: train G1/D1 so I_s = G1(I_f) resembles sharpened reals.

    Writes fdn_g1.ckpt, fdn_d1.ckpt, fdn_history.jsonl and periodic sample
    grids under out_dir; returns their paths plus the final digests.
    """
    if variant not in ("two_stage", "single_gan"):
        raise ValueError(f"train_fdn variant must be two_stage or single_gan, got {variant!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if sample_every is None:
        sample_every = max(1, cfg.steps_fdn // 4)

    torch.manual_seed(cfg.seed)
    g1 = models.GeneratorG1(**(g1_arch or {}))
    d1 = models.PatchDiscriminator(**{"in_channels": 6, **(d1_arch or {})})
    opt_g = torch.optim.Adam(g1.parameters(), lr=cfg.learning_rate, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(d1.parameters(), lr=cfg.learning_rate, betas=(0.5, 0.999))

    history = _HistoryWriter(out_dir / "fdn_history.jsonl")
    try:
        for step, reals, fakes in _batches(manifest, cfg, cfg.steps_fdn):
            i_f = torch.from_numpy(fakes.astype(np.float32))
            i_ru = _usm_tensor(reals, sharpen)

            # one D1 update, skipped while D1 is already winning
            with torch.no_grad():
                i_s_detached = g1(i_f)
            d_loss = loss_d1(
                d1(torch.cat([i_f, i_s_detached], dim=1)),
                d1(torch.cat([i_f, i_ru], dim=1)),
            )
            d_val = float(d_loss.detach())
            _abort_if_nonfinite(d_val, step, "d_loss", d1)
            if d_val >= cfg.d_skip_threshold:
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()

            # one G1 update
            i_s = g1(i_f)
            scores = d1(torch.cat([i_f, i_s], dim=1))
            breakdown = loss_g1(scores, i_s, i_ru, cfg.alpha, step=step)
            total = breakdown.tensor
            if variant == "single_gan":
                # ablation: fold the visual objective into the same generator
                i_fu = _usm_tensor(fakes, sharpen)
                total = total + cfg.beta * (i_s - i_fu).abs().mean()
            opt_g.zero_grad()
            total.backward()
            _abort_if_nonfinite(float(total.detach()), step, "g_loss", g1)
            opt_g.step()

            history.write(breakdown.record("FDN", d_val))
            if sample_every and (step + 1) % sample_every == 0:
                with torch.no_grad():
                    i_s_np = g1(i_f).numpy()
                _sample_grid(out_dir / f"fdn_samples_{step + 1:06d}.png",
                             [fakes, i_s_np, _mask_vis(i_s_np - fakes)])
    finally:
        history.close()

    g1_path, d1_path = out_dir / "fdn_g1.ckpt", out_dir / "fdn_d1.ckpt"
    meta = {"step": cfg.steps_fdn, "seed": cfg.seed, "variant": variant}
    models.save_checkpoint(g1_path, g1, "FDN_G1", meta)
    models.save_checkpoint(d1_path, d1, "FDN_D1", meta)
    return {
        "g1_path": g1_path,
        "d1_path": d1_path,
        "history_path": history.path,
        "g1_digest": models.parameter_digest(g1),
        "d1_digest": models.parameter_digest(d1),
        "modules": {"g1": g1, "d1": d1},
    }


# ---------------------------------------------------------------------------
# VEN


def train_ven(
    cfg: TrainConfig,
    manifest,
    sharpen: imaging.SharpenParams,
    fdn_g1_path,
    out_dir,
    g2_arch: dict | None = None,
    d2_arch: dict | None = None,
    variant: str = "two_stage",
    sample_every: int | None = None,
    digest_check_every: int = 50,
) -> dict:
    """Second stage: train G2 (and D2) against the frozen FDN generator.

    G1 parameters are loaded from fdn_g1_path, frozen out of the optimizer,
    and digest-checked during training; any drift is a hard failure. The
    forward path is G1(G2(I_f)) (or G2(G1(I_f)) for the g1_first ablation).
    """
    if variant not in ("two_stage", "g1_first"):
        raise ValueError(f"train_ven variant must be two_stage or g1_first, got {variant!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if sample_every is None:
        sample_every = max(1, cfg.steps_ven // 4)

    ckpt = models.load_checkpoint(fdn_g1_path, expected_stage="FDN_G1")
    g1 = ckpt.build()
    for p in g1.parameters():
        p.requires_grad_(False)
    frozen_digest = ckpt.digest
    assert models.parameter_digest(g1) == frozen_digest

    torch.manual_seed(cfg.seed + 1)
    g2 = models.GeneratorG2(**(g2_arch or {}))
    d2 = models.PatchDiscriminator(**{"in_channels": 3, **(d2_arch or {})})
    opt_g = torch.optim.Adam(g2.parameters(), lr=cfg.learning_rate, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(d2.parameters(), lr=cfg.learning_rate, betas=(0.5, 0.999))

    def forward_rs(i_f: torch.Tensor) -> torch.Tensor:
        if variant == "g1_first":
            return g2(g1(i_f))
        return g1(g2(i_f))

    history = _HistoryWriter(out_dir / "ven_history.jsonl")
    g2_grad_norm_step0 = None
    try:
        for step, reals, fakes in _batches(manifest, cfg, cfg.steps_ven):
            i_f = torch.from_numpy(fakes.astype(np.float32))
            i_fu = _usm_tensor(fakes, sharpen)

            if step == 0:
                # warm start: identity G2 must reproduce the FDN output bit-exactly
                with torch.no_grad():
                    if not torch.equal(forward_rs(i_f), g1(i_f)):
                        raise RuntimeError("warm-start violated: VEN step-0 output differs from FDN output")

            with torch.no_grad():
                i_rs_detached = forward_rs(i_f)
            d_loss = loss_d2(d2(i_rs_detached), d2(i_fu))
            d_val = float(d_loss.detach())
            _abort_if_nonfinite(d_val, step, "d_loss", d2)
            if d_val >= cfg.d_skip_threshold:
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()

            i_rs = forward_rs(i_f)
            breakdown = loss_g2(d2(i_rs), i_rs, i_fu, cfg.beta, step=step)
            opt_g.zero_grad()
            breakdown.tensor.backward()
            _abort_if_nonfinite(float(breakdown.tensor.detach()), step, "g_loss", g2)
            if step == 0:
                g2_grad_norm_step0 = math.sqrt(sum(
                    float(p.grad.detach().pow(2).sum()) for p in g2.parameters() if p.grad is not None
                ))
            opt_g.step()

            history.write(breakdown.record("VEN", d_val))
            if (step + 1) % digest_check_every == 0 and models.parameter_digest(g1) != frozen_digest:
                raise RuntimeError(f"frozen G1 parameters drifted at step {step}")
            if sample_every and (step + 1) % sample_every == 0:
                with torch.no_grad():
                    i_rs_np = forward_rs(i_f).numpy()
                _sample_grid(out_dir / f"ven_samples_{step + 1:06d}.png",
                             [fakes, i_rs_np, _mask_vis(i_rs_np - fakes)])
    finally:
        history.close()

    if models.parameter_digest(g1) != frozen_digest:
        raise RuntimeError("frozen G1 parameters drifted by end of training")

    g2_path, d2_path = out_dir / "ven_g2.ckpt", out_dir / "ven_d2.ckpt"
    meta = {
        "step": cfg.steps_ven,
        "seed": cfg.seed,
        "variant": variant,
        "fdn_g1_digest": frozen_digest,
        "g2_grad_norm_step0": g2_grad_norm_step0,
    }
    models.save_checkpoint(g2_path, g2, "VEN_G2", meta)
    models.save_checkpoint(d2_path, d2, "VEN_D2", meta)
    return {
        "g2_path": g2_path,
        "d2_path": d2_path,
        "history_path": history.path,
        "g2_digest": models.parameter_digest(g2),
        "frozen_g1_digest": frozen_digest,
        "g2_grad_norm_step0": g2_grad_norm_step0,
        "modules": {"g2": g2, "d2": d2, "g1": g1},
    }


def read_history(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
