"""Black-box detector zoo: forgery classifiers the attack never sees.

This module is deliberately import-isolated: nothing in the FDN/VEN
training or attack paths may depend on it. The attack only ever meets
detectors at evaluation time, through checkpoints on disk.

The registry ships one trainable toy CNN. The well-known architectures
are registered as torchvision-backed entries whose weights a user
supplies; they are plug-in points, not reproductions.
"""

from __future__ import annotations

import json
import math

import numpy as np
import torch
import torch.nn as nn

from . import data, imaging, models


class ToyConvDetector(nn.Module):
    """4-conv binary real/fake classifier; one probability-of-fake per image.

    Per-image normalization after the inner convs makes the decision hang
    on relative texture structure rather than absolute contrast, so plain
    global sharpening does not move it much. InstanceNorm keeps train and
    eval behavior identical (no running stats).
    """

    def __init__(self, base_channels: int = 16):
        super().__init__()
        self.base_channels = base_channels
        b = base_channels

        def norm(ch):
            return nn.InstanceNorm2d(ch, affine=True, track_running_stats=False)

        self.features = nn.Sequential(
            nn.Conv2d(3, b, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(b, b * 2, 3, stride=2, padding=1), norm(b * 2), nn.ReLU(inplace=True),
            nn.Conv2d(b * 2, b * 4, 3, stride=2, padding=1), norm(b * 4), nn.ReLU(inplace=True),
            nn.Conv2d(b * 4, b * 4, 3, padding=1), norm(b * 4), nn.ReLU(inplace=True),
        )
        self.fc = nn.Linear(b * 4, 1)

    def arch_config(self) -> dict:
        return {"kind": "toy_cnn", "base_channels": self.base_channels}

    def forward(self, x):
        h = self.features(x)
        h = h.mean(dim=(2, 3))
        return self.fc(h).squeeze(1)  # logits


class TorchvisionDetector(nn.Module):
    """Adapter making a torchvision classifier fit the one-logit contract."""

    def __init__(self, name: str):
        super().__init__()
        import torchvision.models as tvm

        factories = {
            "resnet50": tvm.resnet50,
            "densenet121": tvm.densenet121,
            "efficientnet": tvm.efficientnet_b0,
            "mobilenet": tvm.mobilenet_v3_small,
            "shufflenet": tvm.shufflenet_v2_x0_5,
            "convnext": tvm.convnext_tiny,
            "efficientnet_sbis": tvm.efficientnet_b4,
        }
        if name not in factories:
            raise ValueError(f"unknown torchvision detector {name!r}")
        self.name = name
        self.net = factories[name](num_classes=1, weights=None)

    def arch_config(self) -> dict:
        return {"kind": "tv_detector", "name": self.name}

    def forward(self, x):
        return self.net(x).squeeze(1)


models.register_arch("toy_cnn", ToyConvDetector)
models.register_arch("tv_detector", TorchvisionDetector)

DETECTOR_REGISTRY = {
    "toy": ToyConvDetector,
    **{name: (lambda n: (lambda **kw: TorchvisionDetector(n)))(name)
       for name in ("resnet50", "densenet121", "efficientnet", "mobilenet",
                    "shufflenet", "convnext", "efficientnet_sbis")},
}


def build_detector(name: str, **kwargs) -> nn.Module:
    if name not in DETECTOR_REGISTRY:
        raise ValueError(f"unknown detector {name!r}; registered: {sorted(DETECTOR_REGISTRY)}")
    return DETECTOR_REGISTRY[name](**kwargs)


def detector_predict(det: nn.Module, imgs: np.ndarray, threshold: float = 0.5):
    """Labels ('FAKE' iff probability-of-fake >= threshold) and probabilities."""
    arr = imaging.validate_batch(imgs, "imgs")
    x = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
    with torch.no_grad():
        probs = torch.sigmoid(det.eval()(x)).numpy().astype(np.float64)
    labels = ["FAKE" if p >= threshold else "REAL" for p in probs]
    return labels, probs


def _predict_manifest_side(det, manifest, side: str, batch_size: int = 64, threshold: float = 0.5):
    labels, probs = [], []
    for reals, fakes in data.batch_iterator(manifest, batch_size, shuffle_seed=None):
        batch = reals if side == "real" else fakes
        lab, pr = detector_predict(det, batch, threshold)
        labels.extend(lab)
        probs.extend(pr.tolist())
    return labels, probs


def evaluate_detector(det: nn.Module, manifest, batch_size: int = 64, threshold: float = 0.5) -> dict:
    """Accuracy over both sides plus prediction precision on the fakes."""
    real_labels, _ = _predict_manifest_side(det, manifest, "real", batch_size, threshold)
    fake_labels, _ = _predict_manifest_side(det, manifest, "fake", batch_size, threshold)
    n = len(real_labels) + len(fake_labels)
    correct = real_labels.count("REAL") + fake_labels.count("FAKE")
    precision = fake_labels.count("FAKE") / len(fake_labels) if fake_labels else None
    return {
        "accuracy": correct / n if n else None,
        "precision_fake": precision,
        "n_real": len(real_labels),
        "n_fake": len(fake_labels),
    }


def train_detector(
    train_manifest,
    val_manifest,
    steps: int,
    batch_size: int,
    learning_rate: float,
    seed: int,
    out_path=None,
    base_channels: int = 16,
    history_path=None,
    sharpen_augment: imaging.SharpenParams | None = None,
    augment_prob: float = 0.5,
) -> tuple:
    """Supervised real-vs-fake training of the toy CNN.

    When sharpen_augment is given, training images are randomly sharpened
    (label-preserving) so the detector learns that sharpening does not
    change authenticity. Returns (module, metrics); a DETECTOR checkpoint
    lands at out_path when given. Aborts on non-finite loss.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    torch.manual_seed(seed)
    det = ToyConvDetector(base_channels=base_channels)
    opt = torch.optim.Adam(det.parameters(), lr=learning_rate)
    bce = nn.BCEWithLogitsLoss()
    aug_rng = np.random.default_rng([seed, 2])

    it = data.batch_iterator(train_manifest, batch_size, shuffle_seed=seed)
    history = []
    step = 0
    while step < steps:
        for reals, fakes in it:
            if step >= steps:
                break
            x_np = np.concatenate([reals, fakes]).astype(np.float32)
            if sharpen_augment is not None:
                # draw for every image regardless of the flip so the rng
                # stream, and with it the run, stays reproducible
                flips = aug_rng.random(len(x_np)) < augment_prob
                amounts = aug_rng.uniform(0.25, 1.25, size=len(x_np))
                for i in np.nonzero(flips)[0]:
                    p = imaging.SharpenParams(sigma=sharpen_augment.sigma,
                                              amount=float(amounts[i]),
                                              threshold=sharpen_augment.threshold)
                    x_np[i] = imaging.unsharp_mask(x_np[i][None], p)[0]
            x = torch.from_numpy(x_np)
            y = torch.cat([torch.zeros(len(reals)), torch.ones(len(fakes))])
            loss = bce(det(x), y)
            loss_val = float(loss.detach())
            if not math.isfinite(loss_val):
                raise RuntimeError(f"detector training diverged at step {step}: loss={loss_val}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append({"step": step, "stage": "DETECTOR", "loss": loss_val})
            step += 1

    metrics = evaluate_detector(det, val_manifest, batch_size=batch_size)
    metrics["steps"] = steps
    if out_path is not None:
        models.save_checkpoint(
            out_path, det, "DETECTOR",
            {"step": steps, "seed": seed, "val_accuracy": metrics["accuracy"]},
        )
    if history_path is not None:
        with open(history_path, "w", encoding="utf-8") as fh:
            for rec in history:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return det, metrics
