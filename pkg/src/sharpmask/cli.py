"""Command-line entry points for the full pipeline.

All subcommands share one run directory (--out) with a fixed layout:

    data/      raw frames (toy profile) and train/val/test manifests
    detector/  trained detector checkpoint + history
    fdn/       stage-1 checkpoints, history, sample grids
    ven/       stage-2 checkpoints, history
    attack/    attack outputs (images, masks, run.json)
    eval/      machine-readable metrics
    report/    rendered tables and figures

Later stages locate earlier outputs through this layout unless the
config names explicit checkpoint/manifest paths. Every stage writes the
resolved config beside its outputs. Errors leave on stderr as a single
JSON line; exit status is 0 on success, 2 for validation problems, 1
for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import attack as attack_mod
from . import config as config_mod
from . import data, detectors, evaluation, imaging, models, training

STAGE_ORDER = ("prepare-data", "train-detectors", "train-fdn", "train-ven",
               "attack", "evaluate", "report")


def _require(path: Path, key: str) -> Path:
    """Resolve a stage input: configured path or run-layout default."""
    if not path.is_file():
        raise config_mod.ConfigError(
            [f"{key}: no checkpoint at {path}; set {key} or run the earlier stage"])
    return path


def _manifest_paths(out: Path) -> dict:
    return {split: out / "data" / f"{split}.jsonl" for split in ("train", "val", "test")}


def run_prepare_data(cfg, out: Path) -> dict:
    data_dir = out / "data"
    if cfg.dataset.tag == "TOY":
        root = data_dir / "raw"
        data.synthesize_toy_dataset(cfg.dataset.n_pairs, cfg.dataset.resolution,
                                    cfg.dataset.seed, root)
    else:
        if cfg.dataset.root is None:
            raise config_mod.ConfigError(
                [f"dataset.root: required for dataset tag {cfg.dataset.tag}"])
        root = Path(cfg.dataset.root)
    train_m, val_m, test_m = data.build_manifests(
        root, cfg.dataset.tag, cfg.dataset.split_fractions, cfg.dataset.seed,
        resolution=cfg.dataset.resolution, variance_floor=cfg.dataset.variance_floor)
    paths = _manifest_paths(out)
    train_m.save(paths["train"])
    val_m.save(paths["val"])
    test_m.save(paths["test"])
    config_mod.write_resolved(cfg, data_dir)
    return {k: str(v) for k, v in paths.items()}


def run_train_detectors(cfg, out: Path) -> dict:
    if cfg.model.detector.name != "toy":
        raise config_mod.ConfigError(
            [f"model.detector.name: only 'toy' is trainable in this pipeline, "
             f"got {cfg.model.detector.name!r}"])
    paths = _manifest_paths(out)
    train_m = data.load_manifest(paths["train"])
    val_m = data.load_manifest(paths["val"])
    det_dir = out / "detector"
    det_dir.mkdir(parents=True, exist_ok=True)
    ckpt = det_dir / "detector.ckpt"
    _, metrics = detectors.train_detector(
        train_m, val_m,
        steps=cfg.train.steps_detector, batch_size=cfg.train.batch_size,
        learning_rate=cfg.train.detector_learning_rate, seed=cfg.train.seed,
        out_path=ckpt, base_channels=cfg.model.detector.base_channels,
        history_path=det_dir / "detector_history.jsonl",
        sharpen_augment=cfg.sharpen.build())
    metrics["checkpoint_digest"] = models.load_checkpoint(ckpt).digest
    (det_dir / "metrics.json").write_text(
        json.dumps(metrics, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    config_mod.write_resolved(cfg, det_dir)
    return {"checkpoint": str(ckpt), **metrics}


def run_train_fdn(cfg, out: Path) -> dict:
    train_m = data.load_manifest(_manifest_paths(out)["train"])
    result = training.train_fdn(
        cfg.train.build(cfg.profile), train_m, cfg.sharpen.build(), out / "fdn",
        g1_arch=cfg.model.g1.as_arch(), d1_arch=cfg.model.d1.as_arch(),
        variant=cfg.train.variant)
    config_mod.write_resolved(cfg, out / "fdn")
    return {k: str(v) for k, v in result.items() if k != "modules"}


def run_train_ven(cfg, out: Path) -> dict:
    train_m = data.load_manifest(_manifest_paths(out)["train"])
    g1_path = Path(cfg.train.fdn_g1_checkpoint or out / "fdn" / "fdn_g1.ckpt")
    _require(g1_path, "train.fdn_g1_checkpoint")
    result = training.train_ven(
        cfg.train.build(cfg.profile), train_m, cfg.sharpen.build(), g1_path,
        out / "ven", g2_arch=cfg.model.g2.as_arch(), d2_arch=cfg.model.d2.as_arch(),
        variant=cfg.train.variant)
    config_mod.write_resolved(cfg, out / "ven")
    return {k: str(v) for k, v in result.items() if k != "modules"}


def run_attack(cfg, out: Path, force: bool = False) -> dict:
    g1_path = Path(cfg.attack.fdn_g1_checkpoint or out / "fdn" / "fdn_g1.ckpt")
    g2_path = Path(cfg.attack.ven_g2_checkpoint or out / "ven" / "ven_g2.ckpt")
    _require(g1_path, "attack.fdn_g1_checkpoint")
    _require(g2_path, "attack.ven_g2_checkpoint")
    manifest_path = Path(cfg.attack.manifest or _manifest_paths(out)["test"])
    manifest = data.load_manifest(manifest_path)
    attack_dir = out / "attack"
    sharpen = cfg.sharpen.build()
    fdn_run = attack_mod.attack_fdn(g1_path, manifest, attack_dir,
                                    batch_size=cfg.attack.batch_size,
                                    sharpen=sharpen, resume=cfg.attack.resume)
    ven_run = attack_mod.attack_ven(g2_path, g1_path, manifest, attack_dir,
                                    batch_size=cfg.attack.batch_size,
                                    sharpen=sharpen, resume=cfg.attack.resume,
                                    force=force)
    config_mod.write_resolved(cfg, attack_dir)
    return {"out": str(attack_dir), "n_images": len(fdn_run.records),
            "checkpoints": {**fdn_run.checkpoints, **ven_run.checkpoints}}


def _stack_family(paths, resolution) -> np.ndarray:
    return np.stack([imaging.load_image(p, resolution) for p in paths])


def run_evaluate(cfg, out: Path) -> dict:
    """Score all four image families against the held-out detector."""
    manifest_path = Path(cfg.attack.manifest or _manifest_paths(out)["test"])
    manifest = data.load_manifest(manifest_path)
    det_path = Path(cfg.eval.detector_checkpoint or out / "detector" / "detector.ckpt")
    _require(det_path, "eval.detector_checkpoint")
    det_ckpt = models.load_checkpoint(det_path, expected_stage="DETECTOR")
    det = det_ckpt.build()

    res = manifest.resolution
    i_f = _stack_family([s.fake_path for s in manifest.samples], res)
    i_fu = imaging.unsharp_mask(i_f, cfg.sharpen.build())
    fdn_out = attack_mod.load_attack_outputs(out / "attack", "fdn")
    ven_out = attack_mod.load_attack_outputs(out / "attack", "ven")
    families = {"I_f": i_f, "I_fu": i_fu, "I_s": fdn_out["images"],
                "I_rs": ven_out["images"]}

    det_name = cfg.model.detector.name
    precision = {det_name: {}}
    for fam, imgs in families.items():
        labels, _ = detectors.detector_predict(det, imgs, threshold=cfg.eval.threshold)
        precision[det_name][fam] = evaluation.prediction_precision(labels)

    # quality of both attack outputs against both plausible references:
    # the sharpened fake (what the perturbation is meant to look like) and
    # the raw fake (how much the attack moved the pixels at all)
    refs = {"I_fu": i_fu, "I_f": i_f}
    outputs = {"I_s": fdn_out["images"], "I_rs": ven_out["images"]}
    psnr_cols, ssim_cols, psnr_summaries = {}, {}, {}
    for ref_name, ref in refs.items():
        for out_name, imgs in outputs.items():
            col = f"{out_name} vs {ref_name}"
            per_image = evaluation.psnr(imgs, ref)
            psnr_summaries[col] = evaluation.psnr_summary(per_image)
            psnr_cols[col] = psnr_summaries[col]["median"]
            ssim_cols[col] = float(np.median(evaluation.ssim(imgs, ref)))
    # an unregistered face plug-in skips the row; never invent numbers
    fd = cfg.eval.face_detector
    if isinstance(fd, str) and fd not in evaluation.FACE_DETECTOR_REGISTRY:
        fd_rates = {fam: "SKIPPED" for fam in families}
    else:
        fd_rates = {fam: evaluation.face_detection_rate(imgs, fd)
                    for fam, imgs in families.items()}
    quality = {
        "PSNR": psnr_cols,
        "SSIM": ssim_cols,
        "face_detection_rate": fd_rates,
    }
    metrics = {
        "precision": precision,
        "quality": quality,
        "psnr_summary": psnr_summaries,
        "checkpoints": {"detector": det_ckpt.digest,
                        **fdn_out["run"]["checkpoints"],
                        **ven_out["run"]["checkpoints"]},
        "n_images": int(i_f.shape[0]),
        "threshold": cfg.eval.threshold,
        "sharpen": cfg.sharpen.build().to_dict(),
    }
    eval_dir = out / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)

    def _jsonable(obj):
        if isinstance(obj, float) and obj == float("inf"):
            return "inf"
        raise TypeError(f"not serializable: {obj!r}")

    (eval_dir / "metrics.json").write_text(
        json.dumps(metrics, sort_keys=True, indent=2, default=_jsonable) + "\n",
        encoding="utf-8")
    config_mod.write_resolved(cfg, eval_dir)
    return metrics


def run_report(cfg, out: Path) -> dict:
    metrics_path = out / "eval" / "metrics.json"
    if not metrics_path.is_file():
        raise config_mod.ConfigError(
            [f"report: no metrics at {metrics_path}; run evaluate first"])
    metrics = json.loads(metrics_path.read_text(encoding="utf-8"))
    summaries = metrics.get("psnr_summary", {})
    n_inf = sum(s.get("n_infinite", 0) for s in summaries.values())
    report = evaluation.EvalReport(
        precision=metrics["precision"], quality=metrics["quality"],
        metadata={"n_images": metrics.get("n_images"),
                  "threshold": metrics.get("threshold"),
                  "checkpoints": metrics.get("checkpoints", {}),
                  "psnr_infinite_excluded": n_inf})
    report_dir = out / "report"
    paths = evaluation.emit_report(report, report_dir,
                                   formats=tuple(cfg.eval.formats), figures=True)
    histories = []
    for stage_dir, name in (("detector", "detector_history.jsonl"),
                            ("fdn", "fdn_history.jsonl"),
                            ("ven", "ven_history.jsonl")):
        hist = out / stage_dir / name
        if hist.is_file():
            histories.extend(training.read_history(hist))
    if histories:
        paths["figure_losses"] = evaluation.plot_loss_curves(
            histories, report_dir / "loss_curves.png")
    config_mod.write_resolved(cfg, report_dir)
    return {k: str(v) for k, v in paths.items()}


def run_toy_e2e(cfg, out: Path, force: bool = False) -> dict:
    """Whole pipeline on the synthetic corpus, one invocation."""
    results = {}
    for name, fn in (("prepare-data", run_prepare_data),
                     ("train-detectors", run_train_detectors),
                     ("train-fdn", run_train_fdn),
                     ("train-ven", run_train_ven)):
        print(f"[toy-e2e] {name}", flush=True)
        results[name] = fn(cfg, out)
    print("[toy-e2e] attack", flush=True)
    results["attack"] = run_attack(cfg, out, force=force)
    print("[toy-e2e] evaluate", flush=True)
    results["evaluate"] = run_evaluate(cfg, out)
    print("[toy-e2e] report", flush=True)
    results["report"] = run_report(cfg, out)
    return results


_RUNNERS = {
    "prepare-data": run_prepare_data,
    "train-detectors": run_train_detectors,
    "train-fdn": run_train_fdn,
    "train-ven": run_train_ven,
    "evaluate": run_evaluate,
    "report": run_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sharpmask",
                                     description="Two-stage anti-forensics pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGE_ORDER + ("toy-e2e",):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None,
                       help="YAML experiment config")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted config override, repeatable")
        p.add_argument("--out", type=Path, default=Path("runs/default"),
                       help="run directory shared by all stages")
        p.add_argument("--seed", type=int, default=None,
                       help="override both train.seed and dataset.seed")
        p.add_argument("--workers", type=int, default=1,
                       help="torch intra-op threads (1 keeps runs reproducible)")
        p.add_argument("--force", action="store_true",
                       help="proceed past checkpoint-mixing digest mismatches")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        import torch
        torch.set_num_threads(max(1, args.workers))
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides += [f"train.seed={args.seed}", f"dataset.seed={args.seed}"]
        # toy-e2e always runs the toy profile, whatever the env says
        pinned = "TOY" if args.command == "toy-e2e" else None
        cfg = config_mod.resolve(args.config, overrides, profile_env=pinned)
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "toy-e2e":
            run_toy_e2e(cfg, out, force=args.force)
        elif args.command == "attack":
            run_attack(cfg, out, force=args.force)
        else:
            _RUNNERS[args.command](cfg, out)
        print(json.dumps({"command": args.command, "out": str(out),
                          "ok": True}, sort_keys=True))
        return 0
    except config_mod.ConfigError as exc:
        print(json.dumps({"command": args.command, "error": str(exc)}), file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, RuntimeError, OSError) as exc:
        print(json.dumps({"command": args.command, "error": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
