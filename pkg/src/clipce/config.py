"""Run configuration: a single JSON document validated against a strict schema.

Unknown keys anywhere are rejected. Missing keys take the defaults below;
the defaults follow the reference hyperparameters (batch 4, adapter learning
rate 0.01, theta 0.5, 15 pre-training of 20 total epochs). The detector
learning rate is 0.02 because the tiny detector converges too slowly at 0.01.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema

from .exceptions import ConfigError

CONFIG_SCHEMA_NAME = "run-config/v1"
TOOL_VERSION = "0.1.0"
STAGES = ("synthesize", "weights", "train", "eval", "analyze")


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_int_pos = {"type": "integer", "minimum": 1}
_path = {"type": ["string", "null"]}

SCHEMA = _obj({
    "schema": {"const": CONFIG_SCHEMA_NAME},
    "workdir": {"type": "string"},
    "seed": {"type": "integer"},
    "stages": {"type": "array", "items": {"enum": list(STAGES)}, "uniqueItems": True},
    "dataset": _obj({
        "manifest": _path,
        "annotations": _path,
        "image_root": _path,
        "depth_root": _path,
        "split": {"type": "string"},
    }),
    "embeddings": _obj({
        "backend": {"type": "string", "pattern": r"^(real|stub:-?\d+)$"},
        "dim": _int_pos,
    }),
    "prompts": _obj({
        "template_pos": {"type": "string"},
        "template_neg": {"type": "string"},
    }),
    "haze": _obj({
        "beta": {"type": "string", "pattern": r"^(fixed:\d+(\.\d+)?|uniform:\d+-\d+)$"},
        "clamp_ratio": {"type": "number", "minimum": 1},
        "depth_invert": {"type": "boolean"},
        "patch_size": _int_pos,
        "bright_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    }),
    "loss": _obj({
        "kind": {"enum": ["ce", "focal", "clipce"]},
        "alpha1": {"type": "number", "minimum": 0},
        "alpha2": {"type": "number", "minimum": 0},
        "gamma": {"type": "number", "minimum": 0},
    }),
    "schedule": _obj({
        "pretrain_epochs": _int_pos,
        "total_epochs": _int_pos,
    }),
    "fame": _obj({
        "hidden_dim": _int_pos,
        "lr": {"type": "number", "minimum": 0},
        "theta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    }),
    "detector": _obj({
        "lr": _pos,
        "batch_size": _int_pos,
        "image_size": {"type": "integer", "minimum": 16},
        "momentum": _num,
        "weight_decay": {"type": "number", "minimum": 0},
    }),
    "eval": _obj({
        "manifest": _path,
        "score_threshold": {"type": "number", "minimum": 0, "maximum": 1},
        "nms_iou": {"type": "number", "minimum": 0, "maximum": 1},
    }),
})

DEFAULTS = {
    "schema": CONFIG_SCHEMA_NAME,
    "workdir": "run",
    "seed": 0,
    "stages": list(STAGES),
    "dataset": {"manifest": None, "annotations": None, "image_root": None, "depth_root": None, "split": "train"},
    "embeddings": {"backend": "stub:0", "dim": 64},
    "prompts": {"template_pos": "a photo of a {cls}", "template_neg": "a photo without {cls}"},
    "haze": {"beta": "uniform:1-5", "clamp_ratio": 100.0, "depth_invert": False, "patch_size": 15,
             "bright_fraction": 0.001},
    "loss": {"kind": "clipce", "alpha1": 0.5, "alpha2": 1.0, "gamma": 2.0},
    "schedule": {"pretrain_epochs": 15, "total_epochs": 20},
    "fame": {"hidden_dim": 512, "lr": 0.01, "theta": 0.5},
    "detector": {"lr": 0.02, "batch_size": 4, "image_size": 64, "momentum": 0.9, "weight_decay": 1e-4},
    "eval": {"manifest": None, "score_threshold": 0.05, "nms_iou": 0.5},
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def validate_config(doc: dict) -> dict:
    """Validate ``doc`` and return it merged over the defaults."""
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config {where}: {exc.message}") from exc
    cfg = _merge(DEFAULTS, doc)
    if cfg["schedule"]["pretrain_epochs"] > cfg["schedule"]["total_epochs"]:
        raise ConfigError("schedule.pretrain_epochs must not exceed schedule.total_epochs")
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    cfg = validate_config(doc)
    cfg["_base_dir"] = str(path.parent.resolve())
    return cfg


def config_hash(cfg: dict) -> str:
    public = {k: v for k, v in cfg.items() if not k.startswith("_")}
    return hashlib.sha256(json.dumps(public, sort_keys=True).encode()).hexdigest()[:16]


def provenance_stamp(cfg: dict) -> dict:
    return {"config_hash": config_hash(cfg), "seed": cfg["seed"], "tool_version": TOOL_VERSION}


def train_config_from(cfg: dict):
    from .detection.train import TrainConfig

    return TrainConfig(
        loss_kind=cfg["loss"]["kind"],
        alpha1=cfg["loss"]["alpha1"],
        alpha2=cfg["loss"]["alpha2"],
        gamma=cfg["loss"]["gamma"],
        pretrain_epochs=cfg["schedule"]["pretrain_epochs"],
        total_epochs=cfg["schedule"]["total_epochs"],
        batch_size=cfg["detector"]["batch_size"],
        lr=cfg["detector"]["lr"],
        momentum=cfg["detector"]["momentum"],
        weight_decay=cfg["detector"]["weight_decay"],
        image_size=cfg["detector"]["image_size"],
        fame_hidden_dim=cfg["fame"]["hidden_dim"],
        fame_lr=cfg["fame"]["lr"],
        theta=cfg["fame"]["theta"],
        template_pos=cfg["prompts"]["template_pos"],
        template_neg=cfg["prompts"]["template_neg"],
    )
