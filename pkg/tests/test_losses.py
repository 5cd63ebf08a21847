import math
from collections import Counter

import numpy as np
import pytest
import torch

from clipce.ame import FocalParams, SimilarityPair, WeightRecord
from clipce.exceptions import InputError, StateError
from clipce.losses import (
    DATASET_ALPHAS,
    ClassificationOutput,
    ClipCeSchedule,
    batch_detection_class_loss,
    ce_loss,
    clipce_grad_logits,
    clipce_loss,
    clipce_loss_torch,
    focal_loss,
)


def _out(p_t, k=3):
    rest = (1 - p_t) / (k - 1)
    return ClassificationOutput(np.array([p_t] + [rest] * (k - 1)), 0)


def _w(w_ame, w_fame=None):
    return WeightRecord(("i", 0), w_ame, SimilarityPair(0, 0), None, w_fame)


def test_ce_values():
    assert ce_loss(_out(1.0)) == 0.0
    assert ce_loss(_out(0.5)) == pytest.approx(math.log(2), abs=1e-12)
    assert ce_loss(_out(math.exp(-3))) == pytest.approx(3.0, abs=1e-12)
    assert ce_loss(_out(0.0)) == pytest.approx(-math.log(1e-7))


def test_focal_values():
    assert focal_loss(_out(1.0)) == 0.0
    assert focal_loss(_out(0.9)) == pytest.approx(0.01 * -math.log(0.9), abs=1e-12)
    assert focal_loss(_out(0.9)) == pytest.approx(0.00105361, abs=1e-8)
    for p in (0.01, 0.3, 0.77):
        assert focal_loss(_out(p), FocalParams(0.0)) == ce_loss(_out(p))


def test_classification_output_validation():
    with pytest.raises(InputError):
        ClassificationOutput(np.array([0.5, 0.6]), 0)
    with pytest.raises(InputError):
        ClassificationOutput(np.array([0.5, 0.5]), 2)
    out = ClassificationOutput.from_logits([0.0, 0.0], 1)
    assert out.p_t == 0.5


def test_clipce_values_and_branches():
    sched = ClipCeSchedule(alpha1=0.5, alpha2=1.0, ep_i=15, ep_j=20)
    got = clipce_loss(_out(0.5), _w(0.8), 1, sched)
    assert got == pytest.approx(math.exp(0.4) * math.log(2), abs=1e-12)
    assert got == pytest.approx(1.034054, abs=1e-6)
    w = _w(0.2, 0.9)
    assert clipce_loss(_out(0.5), w, 15, sched) == pytest.approx(math.exp(0.5 * 0.2) * math.log(2), abs=1e-12)
    assert clipce_loss(_out(0.5), w, 16, sched) == pytest.approx(math.exp(1.0 * 0.9) * math.log(2), abs=1e-12)
    with pytest.raises(StateError):
        clipce_loss(_out(0.5), _w(0.2), 16, sched)
    with pytest.raises(InputError):
        sched.branch(21)
    with pytest.raises(InputError):
        ClipCeSchedule(ep_i=5, ep_j=4)


def test_dataset_alphas():
    assert DATASET_ALPHAS["hazycoco"] == (0.5, 1.0)
    assert DATASET_ALPHAS["rtts"] == (2.0, 2.0)


def test_batch_loss():
    sched = ClipCeSchedule(alpha1=0.0, alpha2=0.0, ep_i=1, ep_j=2)
    assert batch_detection_class_loss([(_out(0.4), _w(0.7))], 1, sched) == ce_loss(_out(0.4))
    bg = [(_out(0.2), None), (_out(0.6), None)]
    assert batch_detection_class_loss(bg, 1, ClipCeSchedule(5.0, 5.0, 1, 2)) == pytest.approx(
        (ce_loss(_out(0.2)) + ce_loss(_out(0.6))) / 2, abs=1e-15)
    s = ClipCeSchedule(1.0, 1.0, 1, 2)
    counter = Counter()
    lo = clipce_loss(_out(0.4), _w(0.2), 1, s, counter)
    hi = clipce_loss(_out(0.4), _w(0.9), 1, s, counter)
    assert hi > lo and counter == {"ame": 2}
    with pytest.raises(InputError):
        batch_detection_class_loss([], 1, s)


def test_grad_logits_formula(rng):
    z = rng.standard_normal(5)
    g = clipce_grad_logits(z, 2, 1.7)
    assert abs(g.sum()) < 1e-12
    assert g[2] < 0 and np.all(np.delete(g, 2) > 0)


def test_torch_form_matches_scalar(rng):
    logits = rng.standard_normal((6, 4))
    labels = np.array([0, 1, 2, 3, 0, 1])
    mult = np.array([1.0, 1.3, 2.0, 1.0, 1.1, 1.0])
    want = np.mean([m * ce_loss(ClassificationOutput.from_logits(z, int(y)))
                    for z, y, m in zip(logits, labels, mult)])
    got = clipce_loss_torch(torch.tensor(logits), torch.tensor(labels), torch.tensor(mult))
    assert float(got) == pytest.approx(want, abs=1e-12)
    # multipliers carry no gradient
    m = torch.tensor(mult, requires_grad=True)
    clipce_loss_torch(torch.tensor(logits, requires_grad=True), torch.tensor(labels), m).backward()
    assert m.grad is None
