"""Fine-tuned AME: an adapter that nudges AME weights by detector confidence.

The adapter is a two-layer ReLU MLP over ``[visual_embedding, roi_feature]``.
Its output is compared against the two prompt embeddings to give an offset
weight; binary cross-entropy against a thresholded-confidence soft label
trains it. The fused FAME weight is the mean of the AME and offset weights.

The adapter is deliberately numpy with a hand-written backward pass: it is
tiny, trains on detached inputs, and never shares a graph with the detector.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ame import two_way_softmax
from .exceptions import ConfigError, InputError, NumericError, ParseError

BCE_EPS = 1e-7
ADAPTER_SCHEMA = "adapter/v1"


@dataclass(frozen=True)
class AdapterConfig:
    input_dim: int
    output_dim: int
    hidden_dim: int = 512
    learning_rate: float = 0.01

    def __post_init__(self):
        for name in ("input_dim", "output_dim", "hidden_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")


@dataclass(frozen=True)
class SoftLabelParams:
    theta: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise InputError(f"theta must lie in (0, 1), got {self.theta}")


@dataclass
class RoiFeature:
    values: np.ndarray
    box: tuple
    iou: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if not self.iou > 0.5:
            raise InputError(f"ROI feature must come from a positive proposal (IoU > 0.5), got {self.iou}")
        if not np.all(np.isfinite(self.values)):
            raise InputError("ROI feature has non-finite entries")


class Adapter:
    """Two fully connected layers, each followed by a ReLU."""

    PARAM_NAMES = ("W1", "b1", "W2", "b2")

    def __init__(self, config: AdapterConfig, seed: int | None = 0, zero: bool = False):
        self.config = config
        self.step_count = 0
        c = config
        if zero:
            self.W1 = np.zeros((c.hidden_dim, c.input_dim))
            self.W2 = np.zeros((c.output_dim, c.hidden_dim))
        else:
            rng = np.random.default_rng(seed)
            self.W1 = rng.standard_normal((c.hidden_dim, c.input_dim)) * math.sqrt(2.0 / c.input_dim)
            self.W2 = rng.standard_normal((c.output_dim, c.hidden_dim)) * math.sqrt(2.0 / c.hidden_dim)
        self.b1 = np.zeros(c.hidden_dim)
        self.b2 = np.zeros(c.output_dim)

    def params(self) -> dict:
        return {n: getattr(self, n) for n in self.PARAM_NAMES}

    def set_params(self, params: dict) -> None:
        for n in self.PARAM_NAMES:
            arr = np.asarray(params[n], dtype=np.float64)
            if arr.shape != getattr(self, n).shape:
                raise ConfigError(f"parameter {n} has shape {arr.shape}, expected {getattr(self, n).shape}")
            setattr(self, n, arr.copy())

    def copy(self) -> "Adapter":
        other = Adapter(self.config, zero=True)
        other.set_params(self.params())
        other.step_count = self.step_count
        return other

    def _inputs(self, visual, roi) -> np.ndarray:
        v = np.asarray(visual, dtype=np.float64)
        r = roi.values if isinstance(roi, RoiFeature) else np.asarray(roi, dtype=np.float64)
        x = np.concatenate([v, r], axis=-1)
        if x.shape[-1] != self.config.input_dim:
            raise ConfigError(
                f"adapter expects input_dim {self.config.input_dim}, got {v.shape[-1]} + {r.shape[-1]}"
            )
        return x

    def forward(self, x: np.ndarray):
        z1 = x @ self.W1.T + self.b1
        h = np.maximum(z1, 0.0)
        z2 = h @ self.W2.T + self.b2
        return np.maximum(z2, 0.0), (x, z1, h, z2)

    def __call__(self, visual, roi) -> np.ndarray:
        out, _ = self.forward(self._inputs(visual, roi))
        return out

    def save(self, path) -> None:
        c = self.config
        doc = {
            "schema": ADAPTER_SCHEMA,
            "input_dim": c.input_dim,
            "hidden_dim": c.hidden_dim,
            "output_dim": c.output_dim,
            "learning_rate": c.learning_rate,
            "step_count": self.step_count,
            "parameters": {n: getattr(self, n).tolist() for n in self.PARAM_NAMES},
        }
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path) -> "Adapter":
        doc = json.loads(Path(path).read_text())
        if doc.get("schema") != ADAPTER_SCHEMA:
            raise ParseError(f"{path}: unsupported adapter schema {doc.get('schema')!r}")
        cfg = AdapterConfig(doc["input_dim"], doc["output_dim"], doc["hidden_dim"], doc["learning_rate"])
        ad = cls(cfg, zero=True)
        ad.set_params(doc["parameters"])
        ad.step_count = doc["step_count"]
        return ad


def adapt(adapter: Adapter, visual, roi) -> np.ndarray:
    if not all(np.all(np.isfinite(p)) for p in adapter.params().values()):
        raise NumericError("adapter parameters are not finite")
    return adapter(visual, roi)


def offset_weight(adapted, t_pos, t_neg) -> float:
    a = np.asarray(adapted, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise NumericError("adapted embedding has non-finite entries")
    t_pos = np.asarray(t_pos, dtype=np.float64)
    t_neg = np.asarray(t_neg, dtype=np.float64)
    if not (a.shape == t_pos.shape == t_neg.shape):
        raise InputError(f"dimension mismatch: {a.shape}, {t_pos.shape}, {t_neg.shape}")
    return float(two_way_softmax(a @ t_neg, a @ t_pos))


def soft_label(p_t: float, params: SoftLabelParams = SoftLabelParams()) -> int:
    """0 when the detector is confident (``p_t > theta``), else 1."""
    if not 0.0 <= p_t <= 1.0:
        raise InputError(f"p_t must lie in [0, 1], got {p_t}")
    return 0 if p_t > params.theta else 1


def adapter_loss(u: int, w_offset: float) -> float:
    w = min(max(float(w_offset), BCE_EPS), 1.0 - BCE_EPS)
    return -(u * math.log(w) + (1 - u) * math.log(1.0 - w))


def fame_weight(w_ame: float, w_offset: float) -> float:
    for name, w in (("w_ame", w_ame), ("w_offset", w_offset)):
        if not 0.0 < w < 1.0:
            raise InputError(f"{name} must lie in (0, 1), got {w}")
    return (w_ame + w_offset) / 2.0


def _stack_batch(adapter: Adapter, batch):
    vis, rois, pts, tps, tns = zip(*batch)
    x = np.stack([adapter._inputs(v, r) for v, r in zip(vis, rois)])
    return x, np.asarray(pts, dtype=np.float64), np.stack(tps), np.stack(tns)


def adapter_loss_and_grad(adapter: Adapter, batch, params: SoftLabelParams = SoftLabelParams()):
    """Mean BCE over ``batch`` and its gradient w.r.t. every adapter parameter.

    ``batch`` is a sequence of ``(visual, roi, p_t, t_pos, t_neg)``.
    Returns ``(loss, grads, w_offset)`` with ``grads`` keyed like
    :meth:`Adapter.params`.
    """
    x, p_t, t_pos, t_neg = _stack_batch(adapter, batch)
    n = x.shape[0]
    u = np.array([soft_label(p, params) for p in p_t], dtype=np.float64)
    out, (x, z1, h, z2) = adapter.forward(x)
    diff = t_neg - t_pos
    w = two_way_softmax(np.sum(out * t_neg, axis=1), np.sum(out * t_pos, axis=1))
    wc = np.clip(w, BCE_EPS, 1.0 - BCE_EPS)
    losses = -(u * np.log(wc) + (1.0 - u) * np.log(1.0 - wc))
    loss = float(losses.mean())

    # d(bce)/d(neg - pos); zero where the clamp is active
    active = (w > BCE_EPS) & (w < 1.0 - BCE_EPS)
    g_delta = np.where(active, w - u, 0.0) / n
    g_out = g_delta[:, None] * diff
    g_z2 = g_out * (z2 > 0)
    g_W2 = g_z2.T @ h
    g_b2 = g_z2.sum(axis=0)
    g_h = g_z2 @ adapter.W2
    g_z1 = g_h * (z1 > 0)
    g_W1 = g_z1.T @ x
    g_b1 = g_z1.sum(axis=0)
    return loss, {"W1": g_W1, "b1": g_b1, "W2": g_W2, "b2": g_b2}, w


def adapter_step(adapter: Adapter, batch, params: SoftLabelParams = SoftLabelParams(), lr: float | None = None):
    """One SGD step on the mean adapter loss; returns ``(adapter, pre_step_loss)``.

    ``p_t`` values in the batch must already be detached plain floats.
    Raises :class:`NumericError` and leaves the adapter untouched if the loss
    or any gradient is non-finite.
    """
    if len(batch) == 0:
        raise InputError("adapter batch is empty")
    loss, grads, _ = adapter_loss_and_grad(adapter, batch, params)
    if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise NumericError(f"non-finite adapter loss {loss}; step skipped (step_count={adapter.step_count})")
    lr = adapter.config.learning_rate if lr is None else lr
    for name, g in grads.items():
        setattr(adapter, name, getattr(adapter, name) - lr * g)
    adapter.step_count += 1
    return adapter, loss
