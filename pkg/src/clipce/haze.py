"""Haze synthesis with the atmospheric scattering model.

Pipeline per image: clamp the relative depth so the farthest value is at most
``clamp_ratio`` times the nearest positive one, normalise to (0, 1], turn it
into a transmission map ``exp(-beta * d)``, estimate the airlight with the dark
channel prior, and composite ``I = J * t + A * (1 - t)``.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import minimum_filter
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import DegenerateInputError, InputError

log = logging.getLogger(__name__)

PROVENANCE_SCHEMA = "provenance/v1"
BETA_SET = (1, 2, 3, 4, 5)


@dataclass(frozen=True)
class HazeParams:
    A: tuple
    beta: float
    clamp_ratio: float = 100.0

    def __post_init__(self):
        if len(self.A) != 3 or any(not 0.0 <= a <= 1.0 for a in self.A):
            raise InputError(f"A must be three values in [0, 1], got {self.A}")
        if not self.beta > 0:
            raise InputError(f"beta must be positive, got {self.beta}")
        if not self.clamp_ratio >= 1:
            raise InputError(f"clamp_ratio must be >= 1, got {self.clamp_ratio}")


@dataclass(frozen=True)
class DcpConfig:
    patch_size: int = 15
    bright_fraction: float = 0.001

    def __post_init__(self):
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise InputError(f"patch_size must be a positive odd integer, got {self.patch_size}")
        if not 0.0 < self.bright_fraction <= 1.0:
            raise InputError(f"bright_fraction must lie in (0, 1], got {self.bright_fraction}")


def _check_depth(d) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 2:
        raise InputError(f"depth map must be 2-D, got shape {d.shape}")
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise InputError("depth values must be finite and nonnegative")
    return d


def clamp_depth(d, clamp_ratio: float = 100.0) -> np.ndarray:
    """Clip depth to ``[d_min, clamp_ratio * d_min]`` with ``d_min`` the smallest positive value."""
    d = _check_depth(d)
    if clamp_ratio < 1:
        raise InputError(f"clamp_ratio must be >= 1, got {clamp_ratio}")
    pos = d[d > 0]
    if pos.size == 0:
        raise DegenerateInputError("depth map has no positive values")
    lo = pos.min()
    hi = clamp_ratio * lo
    # the rounded product can land one ulp high, making hi / lo exceed the ratio
    while hi / lo > clamp_ratio:
        hi = np.nextafter(hi, 0.0)
    return np.clip(d, lo, hi)


def invert_depth(d) -> np.ndarray:
    """Convert disparity-like maps (larger = nearer) into depth-like ones."""
    d = _check_depth(d)
    return d.max() - d


def normalize_depth(d) -> np.ndarray:
    d = _check_depth(d)
    hi = d.max()
    if hi <= 0:
        raise DegenerateInputError("depth map maximum is zero")
    return d / hi


def transmission(d, beta: float) -> np.ndarray:
    if not beta > 0:
        raise InputError(f"beta must be positive, got {beta}")
    return np.exp(-beta * np.asarray(d, dtype=np.float64))


def dark_channel(image, patch_size: int = 15) -> np.ndarray:
    """Per-pixel channel minimum followed by a square minimum filter."""
    return minimum_filter(np.min(image, axis=2), size=patch_size, mode="nearest")


def estimate_atmospheric_light(J, cfg: DcpConfig = DcpConfig()) -> np.ndarray:
    """Mean colour of the pixels whose dark-channel values are in the top ``bright_fraction``.

    Ties at the cut-off are broken by raster order so the result is stable.
    """
    J = np.asarray(J, dtype=np.float64)
    if J.ndim != 3 or J.shape[2] != 3:
        raise InputError(f"image must be HxWx3, got shape {J.shape}")
    H, W = J.shape[:2]
    patch = cfg.patch_size
    if patch > min(H, W):
        patch = min(H, W) if min(H, W) % 2 == 1 else min(H, W) - 1
        warnings.warn(f"image {H}x{W} smaller than DCP patch; using patch {patch}", stacklevel=2)
    dc = dark_channel(J, patch).ravel()
    n = max(1, int(np.floor(dc.size * cfg.bright_fraction)))
    idx = np.argsort(-dc, kind="stable")[:n]
    A = J.reshape(-1, 3)[idx].mean(axis=0)
    return np.clip(A, 0.0, 1.0)


def compose_haze(J, t, A) -> np.ndarray:
    J = np.asarray(J, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64).reshape(1, 1, 3)
    if J.ndim != 3 or J.shape[2] != 3 or t.shape != J.shape[:2]:
        raise InputError(f"shape mismatch: image {J.shape}, transmission {t.shape}")
    t3 = t[..., None]
    return J * t3 + A * (1.0 - t3)


def recover_scene(I, t, A) -> np.ndarray:
    """Invert the scattering model for known ``t`` and ``A``."""
    t3 = np.asarray(t, dtype=np.float64)[..., None]
    A = np.asarray(A, dtype=np.float64).reshape(1, 1, 3)
    return (np.asarray(I, dtype=np.float64) - A * (1.0 - t3)) / t3


def parse_beta_policy(spec: str):
    """``fixed:<k>`` or ``uniform:1-5`` -> a callable drawing beta from a numpy Generator."""
    kind, _, arg = spec.partition(":")
    if kind == "fixed":
        beta = float(arg)
        if beta <= 0:
            raise InputError(f"beta must be positive in {spec!r}")
        return lambda rng: beta
    if kind == "uniform":
        lo, _, hi = arg.partition("-")
        choices = list(range(int(lo), int(hi) + 1))
        if not choices or choices[0] <= 0:
            raise InputError(f"bad beta range in {spec!r}")
        return lambda rng: float(choices[int(rng.integers(len(choices)))])
    raise InputError(f"unknown beta policy {spec!r}; expected fixed:<k> or uniform:<lo>-<hi>")


class HazeSynthesizer(TransformerMixin, BaseEstimator):
    """Turn a clear image and its depth map into a hazy image.

    Parameters
    ----------
    beta : float or None
        Scattering coefficient. ``None`` draws one from {1, ..., 5} per call
        using ``random_state``.
    clamp_ratio : float
        Farthest-to-nearest depth ratio cap.
    patch_size, bright_fraction : DCP airlight estimation settings.
    depth_invert : bool
        Treat incoming maps as disparity.
    random_state : int or None
    """

    def __init__(self, beta=None, clamp_ratio=100.0, patch_size=15, bright_fraction=0.001,
                 depth_invert=False, random_state=None):
        self.beta = beta
        self.clamp_ratio = clamp_ratio
        self.patch_size = patch_size
        self.bright_fraction = bright_fraction
        self.depth_invert = depth_invert
        self.random_state = random_state

    def fit(self, X=None, y=None):
        self.dcp_ = DcpConfig(self.patch_size, self.bright_fraction)
        self.rng_ = np.random.default_rng(self.random_state)
        return self

    def prepare_depth(self, depth) -> np.ndarray:
        d = invert_depth(depth) if self.depth_invert else depth
        return normalize_depth(clamp_depth(d, self.clamp_ratio))

    def transform_one(self, J, depth):
        """Return ``(hazy, params, transmission)`` for one image."""
        if not hasattr(self, "dcp_"):
            self.fit()
        J = np.asarray(J, dtype=np.float64)
        if J.ndim != 3 or J.shape[2] != 3 or np.any(J < 0) or np.any(J > 1):
            raise InputError("clear image must be HxWx3 with values in [0, 1]")
        d = self.prepare_depth(depth)
        beta = float(self.beta) if self.beta is not None else float(BETA_SET[int(self.rng_.integers(len(BETA_SET)))])
        t = transmission(d, beta)
        A = estimate_atmospheric_light(J, self.dcp_)
        params = HazeParams(tuple(float(a) for a in A), beta, float(self.clamp_ratio))
        return compose_haze(J, t, A), params, t

    def transform(self, X):
        """``X`` is an iterable of ``(image, depth)`` pairs; returns hazy images."""
        return [self.transform_one(J, d)[0] for J, d in X]


def degradation_proxy(t, bbox) -> float:
    """Mean ``1 - t`` inside an (x, y, w, h) box."""
    x, y, w, h = bbox
    H, W = t.shape
    x0, y0 = max(0, int(np.floor(x))), max(0, int(np.floor(y)))
    x1, y1 = min(W, int(np.ceil(x + w))), min(H, int(np.ceil(y + h)))
    if x1 <= x0 or y1 <= y0:
        return float("nan")
    return float(np.mean(1.0 - t[y0:y1, x0:x1]))


@dataclass
class SynthesisResult:
    manifest: object
    provenance: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    errors: list = field(default_factory=list)


def synthesize_dataset(manifest, out_dir, beta_policy: str = "uniform:1-5", clamp_ratio: float = 100.0,
                       dcp: DcpConfig = DcpConfig(), seed: int = 0, depth_invert: bool = False,
                       stamp: dict | None = None) -> SynthesisResult:
    """Write a hazy copy of ``manifest`` to ``out_dir``.

    Every image gets its own generator seeded from ``(seed, image_id)`` so
    results do not depend on processing order. Outputs: ``images/*.png``,
    ``provenance.jsonl``, ``annotations.json`` (COCO) and ``manifest.json``.
    Each output annotation's ``degradation`` is set to the mean ``1 - t``
    inside its box.
    """
    from .data import Annotation, DatasetManifest, ManifestEntry, load_depth, load_image, save_image, write_coco

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    draw_beta = parse_beta_policy(beta_policy)
    result = SynthesisResult(manifest=None)
    entries = []
    for entry in manifest.entries:
        if entry.depth_path is None:
            result.skipped.append({"image_id": entry.image_id, "reason": "missing depth"})
            continue
        try:
            J = load_image(manifest.image_path(entry))
            depth = load_depth(manifest.resolve(entry.depth_path))
        except (OSError, ValueError) as exc:
            result.errors.append({"image_id": entry.image_id, "error": str(exc)})
            continue
        if depth.shape != J.shape[:2]:
            result.errors.append({"image_id": entry.image_id, "error": f"depth shape {depth.shape} != image {J.shape[:2]}"})
            continue
        rng = np.random.default_rng([seed, _image_seed(entry.image_id)])
        synth = HazeSynthesizer(beta=draw_beta(rng), clamp_ratio=clamp_ratio, patch_size=dcp.patch_size,
                                bright_fraction=dcp.bright_fraction, depth_invert=depth_invert).fit()
        hazy, params, t = synth.transform_one(J, depth)
        name = f"{Path(entry.image_path).stem}.png"
        save_image(out_dir / "images" / name, hazy)
        anns = [Annotation(a.annotation_id, a.class_index, a.bbox, degradation_proxy(t, a.bbox))
                for a in entry.annotations]
        entries.append(ManifestEntry(entry.image_id, f"images/{name}", anns, entry.depth_path, J.shape[1], J.shape[0]))
        result.provenance.append({
            "schema": PROVENANCE_SCHEMA,
            "image_id": entry.image_id,
            "beta": params.beta,
            "A": list(params.A),
            "clamp_ratio": params.clamp_ratio,
            "seed": seed,
            **(stamp or {}),
        })
    out_manifest = DatasetManifest(entries, list(manifest.class_names), manifest.split, root=out_dir)
    out_manifest.save(out_dir / "manifest.json")
    write_coco(out_dir / "annotations.json", out_manifest)
    with open(out_dir / "provenance.jsonl", "w") as fh:
        for rec in result.provenance:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    if result.skipped:
        log.warning("skipped %d images without depth", len(result.skipped))
    result.manifest = out_manifest
    return result


def _image_seed(image_id) -> int:
    if isinstance(image_id, int) and image_id >= 0:
        return image_id
    import hashlib

    return int.from_bytes(hashlib.sha256(str(image_id).encode()).digest()[:8], "little")
