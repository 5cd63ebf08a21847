import math

import numpy as np
import pytest

from clipce.exceptions import ConfigError, InputError, NumericError
from clipce.fame import (
    Adapter,
    AdapterConfig,
    RoiFeature,
    SoftLabelParams,
    adapt,
    adapter_loss,
    adapter_loss_and_grad,
    adapter_step,
    fame_weight,
    offset_weight,
    soft_label,
)


def _unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def test_zero_adapter_outputs_zero(rng):
    ad = Adapter(AdapterConfig(6, 3, 5), zero=True)
    assert np.array_equal(ad(rng.random(4), rng.random(2)), np.zeros(3))


def test_identity_like_adapter(rng):
    ad = Adapter(AdapterConfig(5, 3, 3), zero=True)
    ad.W1[:, :3] = np.eye(3)
    ad.W2[:] = np.eye(3)
    v = rng.random(3)
    assert np.allclose(ad(v, rng.random(2)), v, atol=0, rtol=0)


def test_adapter_deterministic_and_dims(rng):
    cfg = AdapterConfig(10, 4, 8)
    v, r = rng.random(6), rng.random(4)
    assert np.array_equal(Adapter(cfg, seed=3)(v, r), Adapter(cfg, seed=3)(v, r))
    with pytest.raises(ConfigError):
        Adapter(cfg)(rng.random(5), r)
    bad = Adapter(cfg)
    bad.W1[0, 0] = np.nan
    with pytest.raises(NumericError):
        adapt(bad, v, r)


def test_adapter_save_load(tmp_path, rng):
    ad = Adapter(AdapterConfig(6, 3, 4), seed=1)
    ad.save(tmp_path / "a.json")
    back = Adapter.load(tmp_path / "a.json")
    x = rng.random(6)
    assert np.array_equal(ad(x[:4], x[4:]), back(x[:4], x[4:]))


def test_roi_feature_requires_positive_proposal():
    RoiFeature(np.ones(3), (0, 0, 1, 1), 0.51)
    with pytest.raises(InputError):
        RoiFeature(np.ones(3), (0, 0, 1, 1), 0.5)


def test_offset_weight_values(rng):
    t_pos, t_neg = _unit(rng, 8), _unit(rng, 8)
    assert offset_weight(np.zeros(8), t_pos, t_neg) == 0.5
    e = np.eye(4)
    assert offset_weight(e[1], e[0], e[1]) == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-12)
    assert offset_weight(e[1], e[0], e[1]) == pytest.approx(0.731059, abs=1e-6)
    # equal projections
    assert offset_weight(e[2], e[0], e[1]) == 0.5
    with pytest.raises(NumericError):
        offset_weight(np.full(8, np.inf), t_pos, t_neg)
    with pytest.raises(InputError):
        offset_weight(np.ones(3), t_pos, t_neg)


def test_soft_label():
    assert soft_label(0.7) == 0
    assert soft_label(0.3) == 1
    assert soft_label(0.5) == 1
    assert soft_label(0.61, SoftLabelParams(0.6)) == 0
    with pytest.raises(InputError):
        soft_label(-0.1)
    with pytest.raises(InputError):
        SoftLabelParams(1.0)


def test_adapter_loss_values():
    assert adapter_loss(1, 0.5) == pytest.approx(math.log(2), abs=1e-12)
    assert adapter_loss(0, 1e-9) < 1e-6
    assert adapter_loss(1, 1 - 1e-9) < 1e-6
    assert math.isfinite(adapter_loss(1, 0.0)) and math.isfinite(adapter_loss(0, 1.0))


def test_fame_weight_values():
    assert fame_weight(0.5, 0.5) == 0.5
    assert fame_weight(0.8, 0.2) == 0.5
    for w in (0.01, 0.3, 0.99):
        assert fame_weight(w, w) == w
    with pytest.raises(InputError):
        fame_weight(1.0, 0.5)
    with pytest.raises(InputError):
        fame_weight(0.5, 0.0)


def _batch(rng, n, dv=6, dr=4, pts=None):
    out = []
    for i in range(n):
        p = rng.random() if pts is None else pts[i]
        out.append((_unit(rng, dv), rng.random(dr), p, _unit(rng, dv), _unit(rng, dv)))
    return out


def test_adapter_gradient_matches_finite_differences(rng):
    ad = Adapter(AdapterConfig(10, 6, 8), seed=5)
    batch = _batch(rng, 1)
    _, grads, _ = adapter_loss_and_grad(ad, batch)
    h = 1e-4
    for name, p in ad.params().items():
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            lp = adapter_loss_and_grad(ad, batch)[0]
            p[idx] = old - h
            lm = adapter_loss_and_grad(ad, batch)[0]
            p[idx] = old
            fd[idx] = (lp - lm) / (2 * h)
        scale = max(np.linalg.norm(fd), np.linalg.norm(grads[name]), 1e-12)
        assert np.linalg.norm(fd - grads[name]) / scale <= 1e-4, name


def test_saturated_batch_has_zero_loss_and_no_update():
    ad = Adapter(AdapterConfig(4, 2, 3), zero=True)
    ad.b2[:] = [0.0, 40.0]  # output points at t_neg
    t_pos, t_neg = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    batch = [(np.zeros(2), np.zeros(2), 0.1, t_pos, t_neg)]  # p_t low -> u = 1 -> wants w near 1
    before = {k: v.copy() for k, v in ad.params().items()}
    _, loss = adapter_step(ad, batch)
    assert loss < 1e-6
    assert all(np.array_equal(before[k], v) for k, v in ad.params().items())


def test_small_lr_descent(rng):
    ad = Adapter(AdapterConfig(10, 6, 16, learning_rate=1e-3), seed=2)
    batch = _batch(rng, 8)
    losses = []
    for _ in range(30):
        _, loss = adapter_step(ad, batch)
        losses.append(loss)
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
    assert ad.step_count == 30


def test_nonfinite_step_rejected(rng):
    ad = Adapter(AdapterConfig(10, 6, 8), seed=2)
    batch = _batch(rng, 2)
    ad.b1[0] = np.nan
    with pytest.raises(NumericError):
        adapter_step(ad, batch)
    assert ad.step_count == 0
    with pytest.raises(InputError):
        adapter_step(ad, [])
