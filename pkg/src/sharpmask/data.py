"""Paired real/fake manifests, deterministic splits, and the toy face corpus.

Frames are expected pre-cropped to a square resolution; face extraction is
upstream of this package. A dataset root holds ``real/`` and ``fake/``
subtrees whose filenames match one-to-one. The source identity of a frame
(video it came from) is the filename stem, minus a trailing ``_<digits>``
frame index when present, so every frame of one video lands in one split.

Manifests are line-delimited JSON, one sample per line, with paths stored
relative to the manifest so reruns in different roots stay byte-identical.
Split metadata lives in a ``.meta.json`` sidecar.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imaging

logger = logging.getLogger(__name__)

DATASET_TAGS = ("CELEB_DF", "FFPP", "DEEPER", "TOY")
SPLITS = ("TRAIN", "VAL", "TEST")

_META_SUFFIX = ".meta.json"


@dataclass(frozen=True)
class PairedSample:
    real_path: Path
    fake_path: Path
    source_id: str
    dataset_tag: str

    def __post_init__(self):
        if self.dataset_tag not in DATASET_TAGS:
            raise ValueError(f"unknown dataset_tag {self.dataset_tag!r}, expected one of {DATASET_TAGS}")


@dataclass
class Manifest:
    samples: list
    split: str
    resolution: int
    seed: int
    dataset_tag: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}, expected one of {SPLITS}")
        pairs = [(s.real_path, s.fake_path) for s in self.samples]
        if len(set(pairs)) != len(pairs):
            raise ValueError("duplicate (real, fake) pair in manifest")

    def __len__(self):
        return len(self.samples)

    def source_ids(self) -> set:
        return {s.source_id for s in self.samples}

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        root = path.parent
        lines = []
        for s in self.samples:
            rec = {
                "real": _relativize(s.real_path, root),
                "fake": _relativize(s.fake_path, root),
                "source_id": s.source_id,
                "dataset": s.dataset_tag,
            }
            lines.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        meta = {
            "dataset_tag": self.dataset_tag,
            "n_samples": len(self.samples),
            "resolution": self.resolution,
            "seed": self.seed,
            "split": self.split,
        }
        meta_path = path.with_name(path.name + _META_SUFFIX)
        meta_path.write_text(
            json.dumps(meta, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8"
        )
        return path


def _relativize(p: Path, root: Path) -> str:
    try:
        return p.resolve().relative_to(root.resolve()).as_posix()
    except ValueError:
        # outside the manifest dir; fall back to absolute
        return p.resolve().as_posix()


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    meta_path = path.with_name(path.name + _META_SUFFIX)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    if not meta_path.is_file():
        raise FileNotFoundError(f"manifest sidecar not found: {meta_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    root = path.parent
    samples = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        rec = json.loads(line)
        try:
            samples.append(
                PairedSample(
                    real_path=root / rec["real"],
                    fake_path=root / rec["fake"],
                    source_id=rec["source_id"],
                    dataset_tag=rec["dataset"],
                )
            )
        except KeyError as exc:
            raise ValueError(f"{path}:{lineno}: missing field {exc}") from exc
    return Manifest(
        samples=samples,
        split=meta["split"],
        resolution=meta["resolution"],
        seed=meta["seed"],
        dataset_tag=meta["dataset_tag"],
    )


def source_id_of(filename: str) -> str:
    """Video identity of a frame file: stem minus a trailing _<digits> index."""
    stem = Path(filename).stem
    head, sep, tail = stem.rpartition("_")
    if sep and tail.isdigit() and head:
        return head
    return stem


def _intensity_variance(path: Path) -> float:
    img = imaging.load_image(path)
    return float(np.var(img.mean(axis=0), dtype=np.float64))


def build_manifests(
    root_dir,
    dataset_tag: str,
    split_fractions,
    seed: int,
    resolution: int | None = None,
    variance_floor: float | None = None,
):
    """Scan root_dir/{real,fake}, pair by filename, split disjointly by source.

    Fractions apply to source counts (largest-remainder rounding, so each
    split is within one source of exact). Unmatched filenames are skipped
    with a logged count; pairs where either side has intensity variance
    below `variance_floor` are dropped when a floor is given.

    Returns (train, val, test) manifests.
    """
    root_dir = Path(root_dir)
    if dataset_tag not in DATASET_TAGS:
        raise ValueError(f"unknown dataset_tag {dataset_tag!r}, expected one of {DATASET_TAGS}")
    fractions = tuple(float(f) for f in split_fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError(f"split_fractions must be three non-negative numbers, got {split_fractions!r}")
    if abs(sum(fractions) - 1.0) > 1e-6:
        raise ValueError(f"split_fractions must sum to 1, got {sum(fractions)}")

    real_dir, fake_dir = root_dir / "real", root_dir / "fake"
    for d in (real_dir, fake_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"expected subdirectory {d}")
    real_names = {p.name for p in real_dir.iterdir() if p.is_file()}
    fake_names = {p.name for p in fake_dir.iterdir() if p.is_file()}
    matched = sorted(real_names & fake_names)
    unmatched = sorted((real_names | fake_names) - (real_names & fake_names))
    if unmatched:
        shown = ", ".join(unmatched[:20]) + (" ..." if len(unmatched) > 20 else "")
        logger.warning("skipping %d unmatched frame(s): %s", len(unmatched), shown)

    samples = []
    n_filtered = 0
    for name in matched:
        rp, fp = real_dir / name, fake_dir / name
        if variance_floor is not None:
            if _intensity_variance(rp) < variance_floor or _intensity_variance(fp) < variance_floor:
                n_filtered += 1
                continue
        samples.append(PairedSample(rp, fp, source_id_of(name), dataset_tag))
    if n_filtered:
        logger.warning("variance floor %g dropped %d pair(s)", variance_floor, n_filtered)
    if not samples:
        raise ValueError(f"no usable real/fake pairs under {root_dir}")

    if resolution is None:
        probe = imaging.load_image(samples[0].real_path)
        resolution = int(probe.shape[1])

    by_source = {}
    for s in samples:
        by_source.setdefault(s.source_id, []).append(s)
    sources = sorted(by_source)
    rng = np.random.default_rng(seed)
    order = [sources[i] for i in rng.permutation(len(sources))]

    counts = _allocate(len(sources), fractions)
    cut1, cut2 = counts[0], counts[0] + counts[1]
    assigned = {"TRAIN": order[:cut1], "VAL": order[cut1:cut2], "TEST": order[cut2:]}

    out = []
    for split in SPLITS:
        chosen = []
        for sid in sorted(assigned[split]):
            chosen.extend(sorted(by_source[sid], key=lambda s: s.real_path.name))
        out.append(
            Manifest(samples=chosen, split=split, resolution=resolution, seed=seed, dataset_tag=dataset_tag)
        )
    train_ids, val_ids, test_ids = (m.source_ids() for m in out)
    assert not (train_ids & val_ids or train_ids & test_ids or val_ids & test_ids)
    return tuple(out)


def _allocate(n: int, fractions) -> list:
    """Largest-remainder split of n items; ties go to the earlier split."""
    raw = [f * n for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    leftover = n - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


# ---------------------------------------------------------------------------
# toy corpus


def _soft_ellipse(res: int, cy, cx, ry, rx, sharp=1.5):
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    d = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    return np.clip((1.0 - d) * sharp + 0.5, 0.0, 1.0)


def _toy_real(res: int, rng) -> np.ndarray:
    # smooth background: oriented linear ramp per channel
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64) / max(res - 1, 1)
    img = np.empty((3, res, res))
    for c in range(3):
        theta = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(theta) * xx + np.sin(theta) * yy
        lo, hi = sorted(rng.uniform(0.15, 0.85, size=2))
        img[c] = lo + (hi - lo) * (ramp - ramp.min()) / max(float(np.ptp(ramp)), 1e-9)

    # face ellipse with radial shading
    cy = res / 2 + rng.uniform(-0.06, 0.06) * res
    cx = res / 2 + rng.uniform(-0.06, 0.06) * res
    ry = rng.uniform(0.30, 0.42) * res
    rx = rng.uniform(0.26, 0.38) * res
    face = _soft_ellipse(res, cy, cx, ry, rx)
    skin = np.array([rng.uniform(0.55, 0.9), rng.uniform(0.4, 0.7), rng.uniform(0.3, 0.6)])
    dist = np.sqrt(((np.mgrid[0:res, 0:res][0] - cy) / ry) ** 2 + ((np.mgrid[0:res, 0:res][1] - cx) / rx) ** 2)
    shade = 1.0 - 0.35 * np.clip(dist, 0, 1) ** 2
    for c in range(3):
        img[c] = img[c] * (1 - face) + skin[c] * shade * face

    # eyes: two dark ellipses, symmetric with jitter
    eye_dy = -0.22 * ry
    eye_dx = 0.45 * rx
    for side in (-1, 1):
        ey = cy + eye_dy + rng.uniform(-1, 1)
        ex = cx + side * eye_dx + rng.uniform(-1, 1)
        eye = _soft_ellipse(res, ey, ex, max(0.10 * ry, 1.2), max(0.13 * rx, 1.2), sharp=2.0)
        dark = rng.uniform(0.05, 0.2)
        for c in range(3):
            img[c] = img[c] * (1 - eye) + dark * eye

    # mouth: shallow wide ellipse
    my = cy + 0.45 * ry
    mouth = _soft_ellipse(res, my, cx, max(0.08 * ry, 1.0), max(0.35 * rx, 1.5), sharp=2.0)
    mcol = np.array([rng.uniform(0.45, 0.7), rng.uniform(0.1, 0.25), rng.uniform(0.15, 0.3)])
    for c in range(3):
        img[c] = img[c] * (1 - mouth) + mcol[c] * mouth

    # fine skin grain over the whole frame; the fake pipeline's blur patch
    # erases it locally, which is the dominant real-vs-fake cue
    speckle = rng.uniform(0.0, 1.0, size=(3, res, res))
    speckle = imaging.gaussian_blur(speckle[None], sigma=0.6)[0]
    grain = rng.uniform(0.10, 0.16)
    img = img + grain * (speckle - speckle.mean(axis=(1, 2), keepdims=True))
    return np.clip(img, 0.0, 1.0)


def _bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    res = img.shape[1]
    ys = np.clip(ys, 0, res - 1)
    xs = np.clip(xs, 0, res - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, res - 1)
    x1 = np.minimum(x0 + 1, res - 1)
    wy = ys - y0
    wx = xs - x0
    out = np.empty_like(img)
    for c in range(img.shape[0]):
        ch = img[c]
        out[c] = (
            ch[y0, x0] * (1 - wy) * (1 - wx)
            + ch[y0, x1] * (1 - wy) * wx
            + ch[y1, x0] * wy * (1 - wx)
            + ch[y1, x1] * wy * wx
        )
    return out


def _toy_fake(real: np.ndarray, rng) -> np.ndarray:
    res = real.shape[1]
    img = real.copy()

    # localized smooth warp inside the face region
    wy = res / 2 + rng.uniform(-0.15, 0.15) * res
    wx = res / 2 + rng.uniform(-0.15, 0.15) * res
    sigma_w = rng.uniform(0.10, 0.16) * res
    amp = rng.uniform(1.5, 2.8) * res / 32.0
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    bump = np.exp(-((yy - wy) ** 2 + (xx - wx) ** 2) / (2 * sigma_w**2))
    img = _bilinear_sample(img, yy - amp * np.sin(theta) * bump, xx - amp * np.cos(theta) * bump)

    # blur patch: blend a blurred copy inside a soft disc. Strong enough
    # that a small CNN keys on the texture deficit; plain sharpening
    # cannot restore detail the blur destroyed.
    by = res / 2 + rng.uniform(-0.2, 0.2) * res
    bx = res / 2 + rng.uniform(-0.2, 0.2) * res
    br = rng.uniform(0.22, 0.32) * res
    disc = np.clip(1.5 * (1.0 - np.sqrt((yy - by) ** 2 + (xx - bx) ** 2) / br) + 0.5, 0.0, 1.0)
    blurred = imaging.gaussian_blur(img[None], sigma=float(rng.uniform(1.4, 2.2)))[0]
    img = img * (1 - disc) + blurred * disc

    # slight global color shift
    gain = 1.0 + rng.uniform(-0.04, 0.04, size=(3, 1, 1))
    bias = rng.uniform(-0.03, 0.03, size=(3, 1, 1))
    return np.clip(img * gain + bias, 0.0, 1.0)


def synthesize_toy_dataset(n_pairs: int, resolution: int, seed: int, out_dir) -> Manifest:
    """Generate a paired toy corpus under out_dir and write its manifest.

    Real frames are smooth ellipse-and-gradient faces; fakes add a localized
    warp, a Gaussian blur patch, and a slight color shift. The artifact
    family is detectable by a small CNN by construction. Byte-identical
    for a fixed (n_pairs, resolution, seed).
    """
    if n_pairs < 1:
        raise ValueError(f"n_pairs must be >= 1, got {n_pairs}")
    if resolution not in (32, 64):
        raise ValueError(f"resolution must be 32 or 64, got {resolution}")
    out_dir = Path(out_dir)
    try:
        (out_dir / "real").mkdir(parents=True, exist_ok=True)
        (out_dir / "fake").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create toy dataset dirs under {out_dir}: {exc}") from exc

    samples = []
    children = np.random.SeedSequence(seed).spawn(n_pairs)
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        real = _toy_real(resolution, rng)
        fake = _toy_fake(real, rng)
        name = f"src{i:05d}.png"
        rp, fp = out_dir / "real" / name, out_dir / "fake" / name
        imaging.save_image(rp, real)
        imaging.save_image(fp, fake)
        samples.append(PairedSample(rp, fp, source_id_of(name), "TOY"))

    manifest = Manifest(samples=samples, split="TRAIN", resolution=resolution, seed=seed, dataset_tag="TOY")
    manifest.save(out_dir / "manifest.jsonl")
    return manifest


# ---------------------------------------------------------------------------
# batching


class BatchIterator:
    """Deterministic epoch iterator over aligned (real, fake) batches.

    Each pass over the object is one epoch; order is a pure function of
    (shuffle_seed, epoch index), with shuffle_seed None meaning manifest
    order. Undecodable samples are skipped and counted in
    `skipped_last_epoch`. Yielded arrays are freshly allocated, so handing
    them across threads is safe.
    """

    def __init__(self, manifest: Manifest, batch_size: int, shuffle_seed=None, augment: str = "none"):
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        if augment != "none":
            raise ValueError(f"unsupported augment {augment!r}; only 'none' is implemented")
        if not manifest.samples:
            raise ValueError("cannot iterate an empty manifest")
        self.manifest = manifest
        self.batch_size = batch_size
        self.shuffle_seed = shuffle_seed
        self.epoch = 0
        self.skipped_last_epoch = 0

    def __iter__(self):
        order = np.arange(len(self.manifest.samples))
        if self.shuffle_seed is not None:
            rng = np.random.default_rng((int(self.shuffle_seed), self.epoch))
            order = rng.permutation(order)
        self.epoch += 1
        self.skipped_last_epoch = 0

        res = self.manifest.resolution
        reals, fakes = [], []
        for idx in order:
            s = self.manifest.samples[int(idx)]
            try:
                r = imaging.load_image(s.real_path, expected_size=res)
                f = imaging.load_image(s.fake_path, expected_size=res)
            except (ValueError, FileNotFoundError) as exc:
                self.skipped_last_epoch += 1
                logger.warning("skipping undecodable pair %s: %s", s.source_id, exc)
                continue
            reals.append(r)
            fakes.append(f)
            if len(reals) == self.batch_size:
                yield np.stack(reals), np.stack(fakes)
                reals, fakes = [], []
        if reals:
            yield np.stack(reals), np.stack(fakes)
        if self.skipped_last_epoch:
            logger.warning("epoch %d: skipped %d undecodable pair(s)", self.epoch - 1, self.skipped_last_epoch)


def batch_iterator(manifest: Manifest, batch_size: int, shuffle_seed=None, augment: str = "none") -> BatchIterator:
    return BatchIterator(manifest, batch_size, shuffle_seed=shuffle_seed, augment=augment)
