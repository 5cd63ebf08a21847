"""Stage orchestration: synthesize -> weights -> train -> eval -> analyze.

Every stage writes a stamp ``<workdir>/.stages/<stage>.json`` holding a key
derived from the config and its inputs plus the sha256 of each artifact it
produced. A stage is skipped when its key matches and every artifact still
hashes the same; a tampered or missing artifact forces a rerun.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

from .config import STAGES, config_hash, provenance_stamp, train_config_from
from .data import DatasetManifest, ingest_coco
from .exceptions import ClipCeError, ConfigError

log = logging.getLogger(__name__)

CACHE_DIR_ENV = "CLIPCE_CACHE_DIR"


@dataclass
class PipelineResult:
    status: int
    ran: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)
    error: str | None = None


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _key(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()


class _Stamps:
    def __init__(self, workdir: Path):
        self.dir = workdir / ".stages"

    def path(self, stage):
        return self.dir / f"{stage}.json"

    def fresh(self, stage, key) -> bool:
        p = self.path(stage)
        if not p.exists():
            return False
        stamp = json.loads(p.read_text())
        if stamp.get("key") != key:
            return False
        for rel, digest in stamp["artifacts"].items():
            f = Path(rel)
            if not f.exists() or file_hash(f) != digest:
                log.info("stage %s: artifact %s changed, rerunning", stage, rel)
                return False
        return True

    def write(self, stage, key, artifacts):
        self.dir.mkdir(parents=True, exist_ok=True)
        doc = {"key": key, "artifacts": {str(a): file_hash(a) for a in artifacts}}
        self.path(stage).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")

    def artifact_digest(self, stage) -> str | None:
        p = self.path(stage)
        return json.loads(p.read_text())["key"] if p.exists() else None


def _resolve(cfg, value):
    if value is None:
        return None
    p = Path(value)
    if not p.is_absolute():
        p = Path(cfg.get("_base_dir", ".")) / p
    return p


def source_manifest(cfg, workdir: Path) -> DatasetManifest:
    ds = cfg["dataset"]
    if ds["manifest"]:
        return DatasetManifest.load(_resolve(cfg, ds["manifest"]))
    if not (ds["annotations"] and ds["image_root"]):
        raise ConfigError("dataset needs either 'manifest' or both 'annotations' and 'image_root'")
    manifest, _ = ingest_coco(_resolve(cfg, ds["annotations"]), _resolve(cfg, ds["image_root"]),
                              _resolve(cfg, ds["depth_root"]), split=ds["split"])
    path = workdir / "manifest.json"
    if not path.exists() or path.read_text() != manifest.dumps():
        manifest.save(path)
    manifest.root = workdir
    return manifest


def weight_cache_path(workdir: Path, manifest_hash: str) -> Path:
    env = os.environ.get(CACHE_DIR_ENV)
    if env:
        return Path(env) / f"weights-{manifest_hash[:16]}.jsonl"
    return workdir / "weights.jsonl"


def run_pipeline(cfg: dict, stages=None) -> PipelineResult:
    """Run the requested stages in canonical order; returns a :class:`PipelineResult`.

    A stage failure stops the run with ``status`` 1, leaving earlier
    artifacts in place.
    """
    from .ame import precompute_ame_weights, WeightCache
    from .detection.train import latest_checkpoint, load_detector, train
    from .embeddings import make_provider
    from .evaluation import evaluate, load_object_log, save_report, weight_analysis, write_weight_csv
    from .haze import DcpConfig, synthesize_dataset

    requested = set(stages if stages is not None else cfg["stages"])
    order = [s for s in STAGES if s in requested]
    workdir = _resolve(cfg, cfg["workdir"])
    workdir.mkdir(parents=True, exist_ok=True)
    stamps = _Stamps(workdir)
    stamp = provenance_stamp(cfg)
    chash = config_hash(cfg)
    result = PipelineResult(status=0)

    def stage_done(name, key, artifacts):
        stamps.write(name, key, artifacts)
        result.ran.append(name)
        result.artifacts[name] = [str(a) for a in artifacts]

    try:
        manifest = source_manifest(cfg, workdir)
        hazy_dir = workdir / "hazy"
        if "synthesize" in order:
            key = _key("synthesize", manifest.hash(), cfg["haze"], cfg["seed"])
            if stamps.fresh("synthesize", key):
                result.skipped.append("synthesize")
            else:
                h = cfg["haze"]
                synthesize_dataset(manifest, hazy_dir, h["beta"], h["clamp_ratio"],
                                   DcpConfig(h["patch_size"], h["bright_fraction"]), cfg["seed"],
                                   h["depth_invert"], stamp)
                stage_done("synthesize", key, [hazy_dir / "manifest.json", hazy_dir / "provenance.jsonl",
                                               hazy_dir / "annotations.json"])
        if "synthesize" in cfg["stages"] and (hazy_dir / "manifest.json").exists():
            manifest = DatasetManifest.load(hazy_dir / "manifest.json")

        mhash = manifest.hash()
        cache_path = weight_cache_path(workdir, mhash)
        provider = None
        if {"weights", "train", "analyze"} & set(order):
            provider = make_provider(cfg["embeddings"]["backend"], cfg["embeddings"]["dim"])
        if "weights" in order:
            key = _key("weights", mhash, cfg["embeddings"], cfg["prompts"])
            if stamps.fresh("weights", key):
                result.skipped.append("weights")
            else:
                precompute_ame_weights(manifest, provider, cfg["prompts"]["template_pos"],
                                       cfg["prompts"]["template_neg"], cache_path=cache_path, stamp=stamp)
                stage_done("weights", key, [cache_path])

        train_dir = workdir / "train"
        if "train" in order:
            key = _key("train", mhash, chash, stamps.artifact_digest("weights"))
            if stamps.fresh("train", key):
                result.skipped.append("train")
            else:
                tcfg = train_config_from(cfg)
                cache = WeightCache.load(cache_path) if cache_path.exists() else None
                if cache is not None:
                    cache.check_compatible(provider.backend_id, provider.dim, tcfg.template_pos, tcfg.template_neg)
                res = train(manifest, provider, tcfg, cfg["seed"], train_dir, weight_cache=cache,
                            weight_cache_path=cache_path, stamp=stamp)
                final = res.checkpoint_dir / f"epoch_{tcfg.total_epochs}"
                stage_done("train", key, [train_dir / "train_log.jsonl", train_dir / "object_log.jsonl",
                                          final / "detector.pt"])

        if "eval" in order:
            eval_manifest = manifest
            if cfg["eval"]["manifest"]:
                eval_manifest = DatasetManifest.load(_resolve(cfg, cfg["eval"]["manifest"]))
            key = _key("eval", eval_manifest.hash(), chash, stamps.artifact_digest("train"))
            report_path = workdir / "report.json"
            if stamps.fresh("eval", key):
                result.skipped.append("eval")
            else:
                det = load_detector(latest_checkpoint(train_dir / "ckpt"))
                report = evaluate(det, eval_manifest, 0.5, cfg["eval"]["score_threshold"], cfg["eval"]["nms_iou"])
                save_report(report, report_path, stamp)
                stage_done("eval", key, [report_path])

        if "analyze" in order:
            key = _key("analyze", mhash, chash, stamps.artifact_digest("train"), stamps.artifact_digest("weights"))
            csv_path = workdir / "weights.csv"
            summary_path = workdir / "weights_summary.json"
            if stamps.fresh("analyze", key):
                result.skipped.append("analyze")
            else:
                rows, summary = weight_analysis(manifest, WeightCache.load(cache_path),
                                                load_object_log(train_dir / "object_log.jsonl"))
                write_weight_csv(rows, csv_path)
                summary_path.write_text(json.dumps({**summary, **stamp}, sort_keys=True, indent=1) + "\n")
                stage_done("analyze", key, [csv_path, summary_path])
    except (ClipCeError, OSError, KeyError) as exc:
        log.error("pipeline stopped: %s", exc)
        result.status = 1
        result.error = f"{type(exc).__name__}: {exc}"
    return result
