"""Metrics and report emission.

Precision here is the fraction of presented fakes a detector calls FAKE,
so lower values on attack outputs mean a stronger attack. PSNR uses
MAX=1 with a +inf sentinel for identical images; SSIM runs on the
channel-mean grayscale with the standard 11x11 Gaussian window (sigma
1.5, C1=0.01^2, C2=0.03^2) over valid positions, falling back to one
uniform whole-image window for images smaller than the window.

Reports land as report.md / report.csv / report.json plus matplotlib
figures, all byte-deterministic for a fixed EvalReport.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import imaging

FAMILIES = ("I_f", "I_fu", "I_s", "I_rs")
# header arrows mark the desired direction: baselines stay detected, attacks drop
_DIRECTION = {"I_f": "↑", "I_fu": "↑", "I_s": "↓", "I_rs": "↓"}

_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2
_SSIM_SIZE = 11
_SSIM_SIGMA = 1.5


def prediction_precision(labels) -> float | None:
    """Fraction of FAKE predictions; None when there is nothing to count."""
    labels = list(labels)
    if not labels:
        return None
    bad = sorted({l for l in labels} - {"REAL", "FAKE"})
    if bad:
        raise ValueError(f"labels must be REAL or FAKE, got {bad}")
    return labels.count("FAKE") / len(labels)


def _paired_batches(a: np.ndarray, b: np.ndarray):
    a = imaging.validate_batch(a, "a")
    b = imaging.validate_batch(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a.astype(np.float64), b.astype(np.float64)


def psnr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-image PSNR in dB; +inf sentinel for identical images."""
    a, b = _paired_batches(a, b)
    mse = np.mean((a - b) ** 2, axis=(1, 2, 3))
    out = np.full(mse.shape, np.inf)
    nz = mse > 0
    out[nz] = 10.0 * np.log10(1.0 / mse[nz])
    return out


def _ssim_window() -> np.ndarray:
    half = _SSIM_SIZE // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2.0 * _SSIM_SIGMA**2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_single(ga: np.ndarray, gb: np.ndarray) -> float:
    h, w = ga.shape
    if h < _SSIM_SIZE or w < _SSIM_SIZE:
        weights = np.full((h, w), 1.0 / (h * w))
        mu_a = float(np.sum(weights * ga))
        mu_b = float(np.sum(weights * gb))
        var_a = float(np.sum(weights * ga * ga)) - mu_a * mu_a
        var_b = float(np.sum(weights * gb * gb)) - mu_b * mu_b
        cov = float(np.sum(weights * ga * gb)) - mu_a * mu_b
        return ((2 * mu_a * mu_b + _SSIM_C1) * (2 * cov + _SSIM_C2)) / (
            (mu_a**2 + mu_b**2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
        )

    window = _ssim_window()
    sw = np.lib.stride_tricks.sliding_window_view

    def corr(x):
        return np.einsum("ijkl,kl->ij", sw(x, (_SSIM_SIZE, _SSIM_SIZE)), window)

    mu_a, mu_b = corr(ga), corr(gb)
    var_a = corr(ga * ga) - mu_a * mu_a
    var_b = corr(gb * gb) - mu_b * mu_b
    cov = corr(ga * gb) - mu_a * mu_b
    num = (2 * mu_a * mu_b + _SSIM_C1) * (2 * cov + _SSIM_C2)
    den = (mu_a**2 + mu_b**2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-image SSIM on the channel-mean grayscale."""
    a, b = _paired_batches(a, b)
    ga, gb = a.mean(axis=1), b.mean(axis=1)
    return np.array([_ssim_single(ga[i], gb[i]) for i in range(ga.shape[0])])


def psnr_summary(values) -> dict:
    """Aggregate PSNR with the +inf sentinel kept out of the mean."""
    vals = np.asarray(list(values), dtype=np.float64)
    finite = vals[np.isfinite(vals)]
    return {
        "median": float(np.median(vals)) if vals.size else None,
        "mean_finite": float(finite.mean()) if finite.size else None,
        "n_infinite": int(np.sum(np.isinf(vals))),
        "n": int(vals.size),
    }


# ---------------------------------------------------------------------------
# face-detection plug-in boundary


FACE_DETECTOR_REGISTRY: dict = {}


def register_face_detector(name: str, fn) -> None:
    """fn: (3, H, W) image in [0,1] -> (detected: bool, confidence: float)."""
    FACE_DETECTOR_REGISTRY[name] = fn


def _variance_stub(img: np.ndarray):
    var = float(np.var(img.mean(axis=0), dtype=np.float64))
    return var >= 1e-3, var


register_face_detector("variance_stub", _variance_stub)


def face_detection_rate(imgs: np.ndarray, face_detector_plugin) -> float:
    """Fraction of images in which the plug-in finds a face."""
    if isinstance(face_detector_plugin, str):
        if face_detector_plugin not in FACE_DETECTOR_REGISTRY:
            raise ValueError(
                f"no face detector plug-in named {face_detector_plugin!r}; "
                f"registered: {sorted(FACE_DETECTOR_REGISTRY)}"
            )
        face_detector_plugin = FACE_DETECTOR_REGISTRY[face_detector_plugin]
    arr = imaging.validate_batch(imgs, "imgs")
    hits = [bool(face_detector_plugin(img)[0]) for img in arr]
    return sum(hits) / len(hits)


# ---------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    precision: dict = field(default_factory=dict)  # detector -> family -> float|None
    quality: dict = field(default_factory=dict)    # metric -> column -> float|str|None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for det, row in self.precision.items():
            for fam, v in row.items():
                if v is not None and not 0.0 <= v <= 1.0:
                    raise ValueError(f"precision[{det}][{fam}] = {v} outside [0, 1]")


def _fmt(v) -> str:
    if v is None:
        return "N/A"
    if isinstance(v, str):
        return v
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return f"{v:.4f}"


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _precision_columns(report: EvalReport) -> list:
    cols = [f for f in FAMILIES if any(f in row for row in report.precision.values())]
    extra = sorted({f for row in report.precision.values() for f in row} - set(cols))
    return cols + extra


def _render_markdown(report: EvalReport) -> str:
    out = io.StringIO()
    out.write("# Evaluation report\n\n")
    if report.metadata:
        out.write("## Metadata\n\n")
        for k in sorted(report.metadata):
            out.write(f"- {k}: {report.metadata[k]}\n")
        out.write("\n")

    if report.precision:
        cols = _precision_columns(report)
        out.write("## Undetectability (prediction precision on fakes)\n\n")
        out.write("| detector | " + " | ".join(f"{c} {_DIRECTION.get(c, '')}".strip() for c in cols) + " |\n")
        out.write("|" + "---|" * (len(cols) + 1) + "\n")
        for det in sorted(report.precision):
            row = report.precision[det]
            out.write(f"| {det} | " + " | ".join(_fmt(row.get(c)) for c in cols) + " |\n")
        out.write("\n")

    if report.quality:
        order = ["PSNR", "SSIM", "face_detection_rate"]
        rows = [m for m in order if m in report.quality]
        rows += sorted(set(report.quality) - set(rows))
        # metrics sharing a column set share a table; mixing, say, the
        # reference-labeled PSNR columns with per-family rates reads badly
        groups: list = []
        for m in rows:
            cols = tuple(sorted(report.quality[m]))
            for gcols, gmetrics in groups:
                if gcols == cols:
                    gmetrics.append(m)
                    break
            else:
                groups.append((cols, [m]))
        out.write("## Visual quality\n\n")
        for cols, metrics_group in groups:
            out.write("| metric | " + " | ".join(cols) + " |\n")
            out.write("|" + "---|" * (len(cols) + 1) + "\n")
            for m in metrics_group:
                out.write(f"| {m} | " + " | ".join(_fmt(report.quality[m][c]) for c in cols) + " |\n")
            out.write("\n")

    n_inf = report.metadata.get("psnr_infinite_excluded")
    if n_inf:
        out.write(f"_{n_inf} identical-image pair(s) hit the +inf PSNR sentinel "
                  "and are excluded from mean PSNR aggregates._\n")
    return out.getvalue()


def _render_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["section", "row", "column", "value"])
    cols = _precision_columns(report)
    for det in sorted(report.precision):
        for c in cols:
            writer.writerow(["precision", det, c, _fmt(report.precision[det].get(c))])
    for m in sorted(report.quality):
        for c in sorted(report.quality[m]):
            writer.writerow(["quality", m, c, _fmt(report.quality[m][c])])
    for k in sorted(report.metadata):
        writer.writerow(["metadata", k, "", str(report.metadata[k])])
    return buf.getvalue()


def _figure_precision(report: EvalReport, path: Path) -> None:
    cols = _precision_columns(report)
    dets = sorted(report.precision)
    fig, ax = plt.subplots(figsize=(1.8 + 1.6 * len(cols), 3.4))
    width = 0.8 / max(len(dets), 1)
    xs = np.arange(len(cols))
    for i, det in enumerate(dets):
        vals = [report.precision[det].get(c) for c in cols]
        plotted = [v if v is not None else 0.0 for v in vals]
        ax.bar(xs + i * width, plotted, width, label=det)
    ax.set_xticks(xs + width * (len(dets) - 1) / 2)
    ax.set_xticklabels([f"{c} {_DIRECTION.get(c, '')}".strip() for c in cols])
    ax.set_ylabel("prediction precision")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _figure_quality(report: EvalReport, path: Path) -> None:
    metrics = [m for m in ("PSNR", "SSIM") if m in report.quality]
    fig, axes = plt.subplots(1, max(len(metrics), 1), figsize=(4.2 * max(len(metrics), 1), 3.4))
    if len(metrics) <= 1:
        axes = [axes]
    for ax, m in zip(axes, metrics):
        row = report.quality[m]
        cols = sorted(row)
        vals = [row[c] if isinstance(row[c], (int, float)) and math.isfinite(row[c]) else 0.0
                for c in cols]
        ax.bar(range(len(cols)), vals)
        ax.set_xticks(range(len(cols)))
        ax.set_xticklabels(cols, rotation=20, ha="right", fontsize=8)
        ax.set_title(m)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def emit_report(report: EvalReport, out_dir, formats=("markdown", "csv", "json"),
                figures: bool = True) -> dict:
    """Write the report files; returns {name: path}. Deterministic bytes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    if "markdown" in formats:
        p = out_dir / "report.md"
        p.write_text(_render_markdown(report), encoding="utf-8")
        paths["markdown"] = p
    if "csv" in formats:
        p = out_dir / "report.csv"
        p.write_text(_render_csv(report), encoding="utf-8")
        paths["csv"] = p
    if "json" in formats:
        p = out_dir / "report.json"
        payload = {
            "metadata": _json_safe(report.metadata),
            "precision": _json_safe(report.precision),
            "quality": _json_safe(report.quality),
        }
        p.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        paths["json"] = p
    if figures:
        if report.precision:
            fp = out_dir / "report_precision.png"
            _figure_precision(report, fp)
            paths["figure_precision"] = fp
        if report.quality:
            fq = out_dir / "report_quality.png"
            _figure_quality(report, fq)
            paths["figure_quality"] = fq
    return paths


def plot_loss_curves(history_records: list, out_path) -> Path:
    """One panel per stage: generator terms plus the discriminator loss."""
    out_path = Path(out_path)
    stages = sorted({r["stage"] for r in history_records})
    fig, axes = plt.subplots(1, max(len(stages), 1), figsize=(5.0 * max(len(stages), 1), 3.4))
    if len(stages) <= 1:
        axes = [axes]
    for ax, stage in zip(axes, stages):
        recs = [r for r in history_records if r["stage"] == stage]
        steps = [r["step"] for r in recs]
        plotted = 0
        for key in ("total", "gan_term", "recon_term", "d_loss", "loss"):
            if all(key in r for r in recs):
                ax.plot(steps, [r[key] for r in recs], label=key, linewidth=1.0)
                plotted += 1
        ax.set_title(f"{stage} losses")
        ax.set_xlabel("step")
        if plotted:
            ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path
