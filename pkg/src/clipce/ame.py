"""Approximation-of-Mutual-Exclusion weights and the focal baseline weight.

An object's AME weight is the two-way softmax score of its similarity to the
negative prompt ("a photo without {cls}") against its similarity to the
positive prompt ("a photo of a {cls}"). Degraded objects look more like the
negative prompt and so get larger weights.

Because the encoders are frozen, AME weights never change during training and
are computed once into a JSON-lines cache keyed by ``(image_id, annotation_id)``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .embeddings import (
    DEFAULT_TEMPLATE_NEG,
    DEFAULT_TEMPLATE_POS,
    CropPolicy,
    EmbeddingProvider,
    build_prompt_pair,
    crop_region,
)
from .exceptions import CacheMismatchError, InputError, ParseError, ProviderError

log = logging.getLogger(__name__)

CACHE_SCHEMA = "weight-cache/v1"
CACHE_VERSION = 1


@dataclass(frozen=True)
class SimilarityPair:
    sim_pos: float
    sim_neg: float


@dataclass(frozen=True)
class FocalParams:
    gamma: float = 2.0

    def __post_init__(self):
        if not self.gamma >= 0:
            raise InputError(f"focal gamma must be >= 0, got {self.gamma}")


@dataclass
class WeightRecord:
    object_id: tuple
    w_ame: float
    similarities: SimilarityPair
    w_offset: float | None = None
    w_fame: float | None = None


def similarity(visual, text) -> float:
    """Dot-product similarity; cosine when both inputs are unit-norm."""
    v = np.asarray(visual, dtype=np.float64)
    t = np.asarray(text, dtype=np.float64)
    if v.shape != t.shape or v.ndim != 1:
        raise InputError(f"dimension mismatch: {v.shape} vs {t.shape}")
    return float(v @ t)


def two_way_softmax(score_neg, score_pos):
    """``e^neg / (e^neg + e^pos)`` with max-subtraction; works on scalars or arrays."""
    neg = np.asarray(score_neg, dtype=np.float64)
    pos = np.asarray(score_pos, dtype=np.float64)
    m = np.maximum(neg, pos)
    en = np.exp(neg - m)
    ep = np.exp(pos - m)
    return en / (en + ep)


def ame_weight(sims: SimilarityPair) -> float:
    sp, sn = float(sims.sim_pos), float(sims.sim_neg)
    if not (math.isfinite(sp) and math.isfinite(sn)):
        raise InputError(f"similarities must be finite, got {sims}")
    return float(two_way_softmax(sn, sp))


def focal_weight(p_t: float, params: FocalParams = FocalParams()) -> float:
    """Focal-loss modulating factor ``(1 - p_t) ** gamma``."""
    if not 0.0 <= p_t <= 1.0:
        raise InputError(f"p_t must lie in [0, 1], got {p_t}")
    return float((1.0 - p_t) ** params.gamma)


def object_weight(provider: EmbeddingProvider, crop, prompt, policy=None, degradation=None) -> WeightRecord:
    v = provider.encode_image_crop(crop, policy, prompt=prompt, degradation=degradation)
    t_pos = provider.encode_text(prompt.positive_text)
    t_neg = provider.encode_text(prompt.negative_text)
    sims = SimilarityPair(similarity(v, t_pos), similarity(v, t_neg))
    return WeightRecord(object_id=(), w_ame=ame_weight(sims), similarities=sims)


def templates_hash(template_pos: str, template_neg: str) -> str:
    return hashlib.sha256(f"{template_pos}\x00{template_neg}".encode()).hexdigest()[:16]


@dataclass
class WeightCache:
    """In-memory weight cache plus the header fields that guard reuse."""

    backend_id: str
    dim: int
    template_pos: str
    template_neg: str
    records: dict = field(default_factory=dict)
    complete: bool = True
    stamp: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "schema": CACHE_SCHEMA,
            "version": CACHE_VERSION,
            "backend_id": self.backend_id,
            "dim": self.dim,
            "template_pos": self.template_pos,
            "template_neg": self.template_neg,
            "templates_hash": templates_hash(self.template_pos, self.template_neg),
            "complete": self.complete,
            **self.stamp,
        }

    def get(self, image_id, annotation_id) -> dict | None:
        return self.records.get((image_id, annotation_id))

    def w_ame(self, image_id, annotation_id) -> float:
        return self.records[(image_id, annotation_id)]["w_ame"]

    def __len__(self):
        return len(self.records)

    def check_compatible(self, backend_id: str, dim: int, template_pos: str, template_neg: str):
        mismatches = [
            name
            for name, have, want in (
                ("backend_id", self.backend_id, backend_id),
                ("dim", self.dim, dim),
                ("template_pos", self.template_pos, template_pos),
                ("template_neg", self.template_neg, template_neg),
            )
            if have != want
        ]
        if mismatches:
            raise CacheMismatchError(f"weight cache was built with different {', '.join(mismatches)}")

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps(self.header(), sort_keys=True)]
        for key in sorted(self.records, key=_sort_key):
            lines.append(json.dumps(self.records[key], sort_keys=True))
        path.write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "WeightCache":
        path = Path(path)
        try:
            lines = path.read_text().splitlines()
            header = json.loads(lines[0])
        except (OSError, IndexError, json.JSONDecodeError) as exc:
            raise ParseError(f"cannot read weight cache {path}: {exc}") from exc
        if header.get("schema") != CACHE_SCHEMA:
            raise CacheMismatchError(f"{path}: unsupported schema {header.get('schema')!r}")
        known = {"schema", "version", "backend_id", "dim", "template_pos", "template_neg", "templates_hash", "complete"}
        cache = cls(
            backend_id=header["backend_id"],
            dim=header["dim"],
            template_pos=header["template_pos"],
            template_neg=header["template_neg"],
            complete=header.get("complete", True),
            stamp={k: v for k, v in header.items() if k not in known},
        )
        if header.get("templates_hash") != templates_hash(cache.template_pos, cache.template_neg):
            raise CacheMismatchError(f"{path}: templates hash does not match header templates")
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            cache.records[(rec["image_id"], rec["annotation_id"])] = rec
        return cache


def _sort_key(key):
    return tuple((0, k) if isinstance(k, (int, float)) else (1, str(k)) for k in key)


@dataclass
class PrecomputeReport:
    n_objects: int = 0
    errors: list = field(default_factory=list)


def precompute_ame_weights(
    manifest,
    provider: EmbeddingProvider,
    template_pos: str = DEFAULT_TEMPLATE_POS,
    template_neg: str = DEFAULT_TEMPLATE_NEG,
    policy: CropPolicy | None = None,
    cache_path=None,
    stamp: dict | None = None,
    use_degradation_hint: bool = True,
) -> tuple[WeightCache, PrecomputeReport]:
    """Compute ``w_ame`` for every annotation in ``manifest``.

    Unreadable images are recorded in the report and skipped. A provider
    failure aborts the run; whatever was computed is written with
    ``complete: false`` before the :class:`ProviderError` propagates.

    With a stub provider, an annotation's ``degradation`` field (set by the
    synthetic-scene generator) is passed through as the stub's mixing score.
    """
    from .data import load_image

    policy = policy or CropPolicy()
    cache = WeightCache(provider.backend_id, provider.dim, template_pos, template_neg, stamp=dict(stamp or {}))
    report = PrecomputeReport()
    prompts = {
        name: build_prompt_pair(name, template_pos, template_neg) for name in manifest.class_names
    }
    try:
        for entry in manifest.entries:
            try:
                image = load_image(manifest.image_path(entry))
            except (OSError, ValueError) as exc:
                report.errors.append({"image_id": entry.image_id, "error": str(exc)})
                continue
            for ann in entry.annotations:
                cls_name = manifest.class_names[ann.class_index]
                crop = crop_region(image, ann.bbox, policy)
                hint = ann.degradation if use_degradation_hint else None
                rec = object_weight(provider, crop, prompts[cls_name], policy, hint)
                cache.records[(entry.image_id, ann.annotation_id)] = {
                    "image_id": entry.image_id,
                    "annotation_id": ann.annotation_id,
                    "class": cls_name,
                    "sim_pos": rec.similarities.sim_pos,
                    "sim_neg": rec.similarities.sim_neg,
                    "w_ame": rec.w_ame,
                }
                report.n_objects += 1
    except ProviderError:
        cache.complete = False
        if cache_path is not None:
            cache.save(cache_path)
        raise
    if report.errors:
        log.warning("weight precompute skipped %d images", len(report.errors))
    if cache_path is not None:
        cache.save(cache_path)
    return cache, report


def load_or_compute_weights(cache_path, manifest, provider, template_pos, template_neg, **kw) -> WeightCache:
    """Reuse a compatible cache at ``cache_path`` or rebuild it."""
    path = Path(cache_path) if cache_path is not None else None
    if path is not None and path.exists():
        try:
            cache = WeightCache.load(path)
            cache.check_compatible(provider.backend_id, provider.dim, template_pos, template_neg)
            if cache.complete:
                return cache
        except (CacheMismatchError, ParseError) as exc:
            log.warning("discarding weight cache %s: %s", path, exc)
    cache, _ = precompute_ame_weights(manifest, provider, template_pos, template_neg, cache_path=path, **kw)
    return cache


def iter_weights(cache: WeightCache) -> Iterable[dict]:
    for key in sorted(cache.records, key=_sort_key):
        yield cache.records[key]
