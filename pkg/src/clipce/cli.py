"""Command-line entry point: ``clipce <verb> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import DEFAULTS, load_config, provenance_stamp, train_config_from, validate_config
from .exceptions import ClipCeError

log = logging.getLogger("clipce")


def _config(args) -> dict:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = validate_config({})
        cfg["_base_dir"] = str(Path.cwd())
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def cmd_hazegen(args) -> int:
    from .data import DatasetManifest
    from .haze import DcpConfig, synthesize_dataset

    cfg = _config(args)
    manifest = DatasetManifest.load(args.manifest)
    res = synthesize_dataset(manifest, args.out, args.beta, args.clamp_ratio,
                             DcpConfig(cfg["haze"]["patch_size"], cfg["haze"]["bright_fraction"]),
                             cfg["seed"], args.depth_invert, provenance_stamp(cfg))
    print(f"wrote {len(res.provenance)} hazy images to {args.out} "
          f"({len(res.skipped)} skipped, {len(res.errors)} errors)")
    return 1 if res.errors else 0


def cmd_weights(args) -> int:
    from .ame import precompute_ame_weights
    from .data import DatasetManifest
    from .embeddings import make_provider

    cfg = _config(args)
    backend = args.backend or cfg["embeddings"]["backend"]
    provider = make_provider(backend, cfg["embeddings"]["dim"])
    manifest = DatasetManifest.load(args.manifest)
    _, report = precompute_ame_weights(manifest, provider, cfg["prompts"]["template_pos"],
                                       cfg["prompts"]["template_neg"], cache_path=args.out,
                                       stamp=provenance_stamp(cfg))
    print(f"wrote {report.n_objects} weights to {args.out} ({len(report.errors)} images failed)")
    return 0


def cmd_train(args) -> int:
    from .data import DatasetManifest
    from .detection.train import train
    from .embeddings import make_provider
    from .pipeline import source_manifest, weight_cache_path, _resolve

    cfg = _config(args)
    workdir = Path(args.out) if args.out else _resolve(cfg, cfg["workdir"])
    workdir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest.load(args.manifest) if args.manifest else source_manifest(cfg, workdir)
    provider = make_provider(cfg["embeddings"]["backend"], cfg["embeddings"]["dim"])
    cache_path = Path(args.cache) if args.cache else weight_cache_path(workdir, manifest.hash())
    res = train(manifest, provider, train_config_from(cfg), cfg["seed"], workdir / "train",
                weight_cache_path=cache_path, stamp=provenance_stamp(cfg))
    last = res.epoch_logs[-1]
    print(f"trained {len(res.epoch_logs)} epochs; final loss_total={last['loss_total']:.4f}; "
          f"checkpoints in {res.checkpoint_dir}")
    return 0


def cmd_eval(args) -> int:
    from .data import DatasetManifest
    from .detection.train import latest_checkpoint, load_detector
    from .evaluation import evaluate, save_report

    cfg = _config(args)
    ckpt = Path(args.ckpt)
    if not (ckpt / "detector.pt").exists():
        ckpt = latest_checkpoint(ckpt if ckpt.name == "ckpt" else ckpt / "ckpt" if (ckpt / "ckpt").exists() else ckpt)
    det = load_detector(ckpt)
    report = evaluate(det, DatasetManifest.load(args.manifest), 0.5, cfg["eval"]["score_threshold"],
                      cfg["eval"]["nms_iou"])
    save_report(report, args.out, provenance_stamp(cfg))
    print(f"mAP@0.5 = {report.map50:.4f}")
    return 0


def cmd_analyze(args) -> int:
    from .ame import WeightCache
    from .data import DatasetManifest
    from .evaluation import load_object_log, weight_analysis, write_weight_csv

    log_path = Path(args.log)
    if log_path.is_dir():
        log_path = log_path / "object_log.jsonl"
    manifest = DatasetManifest.load(args.manifest) if args.manifest else None
    rows, summary = weight_analysis(manifest, WeightCache.load(args.cache), load_object_log(log_path))
    write_weight_csv(rows, args.out)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_pipeline(args) -> int:
    from .pipeline import run_pipeline

    cfg = _config(args)
    res = run_pipeline(cfg, args.stages.split(",") if args.stages else None)
    print(json.dumps({"status": res.status, "ran": res.ran, "skipped": res.skipped, "error": res.error}))
    return res.status


def cmd_make_shapes(args) -> int:
    from .synthetic import make_shapes_dataset

    m = make_shapes_dataset(args.out, args.n_images, args.size, args.seed)
    print(f"wrote {len(m.entries)} scenes to {args.out}")
    return 0


def cmd_ingest(args) -> int:
    from .data import ingest_coco

    manifest, report = ingest_coco(args.annotations, args.image_root, args.depth_root, args.split)
    manifest.save(args.out)
    print(f"{len(manifest.entries)} images; dropped {report['dropped_boxes']} boxes; "
          f"{len(report['missing_images'])} missing images")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clipce", description="CLIP-guided CE detection training toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="run config JSON")
        sp.set_defaults(func=fn)
        return sp

    sp = add("hazegen", cmd_hazegen, "synthesize hazy images from clear images and depth")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--beta", default=DEFAULTS["haze"]["beta"], help="fixed:<k> or uniform:1-5")
    sp.add_argument("--clamp-ratio", type=float, default=DEFAULTS["haze"]["clamp_ratio"])
    sp.add_argument("--seed", type=int)
    sp.add_argument("--depth-invert", action="store_true")

    sp = add("weights", cmd_weights, "precompute AME weights")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--backend", help="real or stub:<seed> (overrides config)")

    sp = add("train", cmd_train, "train the reference detector")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--manifest")
    sp.add_argument("--cache", help="AME weight cache path")
    sp.add_argument("--out", help="output directory (default: config workdir)")

    sp = add("eval", cmd_eval, "mAP@0.5 of a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)

    sp = add("analyze-weights", cmd_analyze, "AME vs focal weight report")
    sp.add_argument("--cache", required=True)
    sp.add_argument("--log", required=True, help="object_log.jsonl or the training directory")
    sp.add_argument("--out", required=True)
    sp.add_argument("--manifest", help="manifest carrying degradation scores")

    sp = add("pipeline", cmd_pipeline, "run configured stages end to end")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--stages", help="comma-separated subset of stages")

    sp = add("make-shapes", cmd_make_shapes, "write a synthetic shapes dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-images", type=int, default=200)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("ingest", cmd_ingest, "COCO annotations -> manifest")
    sp.add_argument("--annotations", required=True)
    sp.add_argument("--image-root", required=True)
    sp.add_argument("--depth-root")
    sp.add_argument("--split", default="train")
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ClipCeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def hazegen_main(argv=None) -> int:
    """Standalone ``hazegen`` script."""
    return main(["hazegen", *(sys.argv[1:] if argv is None else argv)])


if __name__ == "__main__":
    sys.exit(main())
