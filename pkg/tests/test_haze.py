import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from clipce.data import DatasetManifest, load_image
from clipce.exceptions import DegenerateInputError, InputError
from clipce.haze import (
    DcpConfig,
    HazeSynthesizer,
    HazeParams,
    clamp_depth,
    compose_haze,
    dark_channel,
    estimate_atmospheric_light,
    normalize_depth,
    parse_beta_policy,
    synthesize_dataset,
    transmission,
)


def test_clamp_depth_examples():
    assert clamp_depth(np.array([[1.0, 50.0, 1000.0]])).tolist() == [[1.0, 50.0, 100.0]]
    d = np.array([[2.0, 3.0], [50.0, 7.0]])
    assert np.array_equal(clamp_depth(d), d)
    assert np.array_equal(clamp_depth(np.full((3, 3), 4.0)), np.full((3, 3), 4.0))
    # zeros are lifted to the smallest positive depth
    assert clamp_depth(np.array([[0.0, 0.5, 80.0]])).tolist() == [[0.5, 0.5, 50.0]]
    with pytest.raises(DegenerateInputError):
        clamp_depth(np.zeros((2, 2)))
    with pytest.raises(InputError):
        clamp_depth(np.array([[1.0, -1.0]]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (6, 7), elements=st.floats(0.0, 1e6, allow_nan=False)).filter(lambda a: (a > 0).any()),
       st.floats(1.0, 1000.0))
def test_clamp_ratio_and_order(d, ratio):
    c = clamp_depth(d, ratio)
    assert c.max() <= ratio * c.min() * (1 + 1e-12)
    order = np.argsort(d, axis=None, kind="stable")
    assert np.all(np.diff(c.ravel()[order]) >= 0)


def test_normalize_depth():
    assert normalize_depth(np.array([[1.0, 50.0, 100.0]])).tolist() == [[0.01, 0.5, 1.0]]
    assert np.array_equal(normalize_depth(np.full((2, 2), 3.0)), np.ones((2, 2)))
    with pytest.raises(DegenerateInputError):
        normalize_depth(np.zeros((2, 2)))


def test_transmission_values():
    assert transmission(np.zeros((2, 2)), 3.0).tolist() == [[1.0, 1.0], [1.0, 1.0]]
    assert transmission(np.array([math.log(2)]), 1.0)[0] == pytest.approx(0.5, abs=1e-15)
    assert transmission(np.array([1.0]), 5.0)[0] == pytest.approx(0.006738, abs=1e-6)
    with pytest.raises(InputError):
        transmission(np.ones(2), 0.0)


def _brute_dark_channel(img, patch):
    H, W, _ = img.shape
    r = patch // 2
    m = img.min(axis=2)
    out = np.empty((H, W))
    for y in range(H):
        for x in range(W):
            ys = np.clip(np.arange(y - r, y + r + 1), 0, H - 1)
            xs = np.clip(np.arange(x - r, x + r + 1), 0, W - 1)
            out[y, x] = m[np.ix_(ys, xs)].min()
    return out


def test_dark_channel_matches_brute_force(rng):
    img = rng.random((20, 23, 3))
    assert np.array_equal(dark_channel(img, 5), _brute_dark_channel(img, 5))


def test_airlight_constant_and_white_patch():
    c = np.full((32, 32, 3), 0.37)
    assert np.allclose(estimate_atmospheric_light(c), 0.37, atol=1e-15, rtol=0)
    img = np.zeros((32, 32, 3))
    img[4:24, 6:26] = 1.0  # 20x20 > 15x15 window
    assert np.array_equal(_brute_dark_channel(img, 15).max(), 1.0)
    assert np.array_equal(estimate_atmospheric_light(img), np.ones(3))


def test_airlight_small_image_warns(rng):
    with pytest.warns(UserWarning):
        A = estimate_atmospheric_light(rng.random((6, 8, 3)))
    assert A.shape == (3,)


def test_airlight_from_known_haze(rng):
    H = W = 96
    J = rng.random((H, W, 3)) * 0.6
    A = np.array([0.8, 0.8, 0.8])
    J[:24] = A + rng.uniform(-0.05, 0.05, (24, W, 3))  # sky band
    d = np.ones((H, W))
    d[24:] = np.linspace(0.05, 0.5, H - 24)[:, None]
    I = compose_haze(J, transmission(d, 3.0), A)
    assert np.all(np.abs(estimate_atmospheric_light(I) - A) <= 0.05)


def test_compose_haze_values(rng):
    J = rng.random((4, 5, 3))
    A = np.array([0.9, 0.8, 0.7])
    assert np.array_equal(compose_haze(J, np.ones((4, 5)), A), J)
    assert np.allclose(compose_haze(J, np.full((4, 5), 1e-12), A), np.broadcast_to(A, J.shape), atol=1e-11)
    assert compose_haze(np.full((1, 1, 3), 0.2), np.full((1, 1), 0.5), np.full(3, 0.8))[0, 0, 0] == pytest.approx(0.5)
    with pytest.raises(InputError):
        compose_haze(J, np.ones((5, 4)), A)


def test_beta_policy():
    g = np.random.default_rng(0)
    assert parse_beta_policy("fixed:3")(g) == 3.0
    draws = {parse_beta_policy("uniform:1-5")(g) for _ in range(200)}
    assert draws == {1.0, 2.0, 3.0, 4.0, 5.0}
    for bad in ("fixed:0", "gauss:1", "uniform:0-3"):
        with pytest.raises(InputError):
            parse_beta_policy(bad)


def test_haze_params_validation():
    with pytest.raises(InputError):
        HazeParams((0.5, 0.5), 1.0)
    with pytest.raises(InputError):
        HazeParams((0.5, 0.5, 0.5), 0.0)
    with pytest.raises(InputError):
        DcpConfig(patch_size=4)


def test_estimator_api(rng):
    J = rng.random((24, 24, 3))
    depth = rng.uniform(1, 50, (24, 24))
    synth = HazeSynthesizer(beta=2.0, patch_size=7).fit()
    hazy, params, t = synth.transform_one(J, depth)
    assert params.beta == 2.0 and hazy.shape == J.shape
    assert np.allclose(synth.transform([(J, depth)])[0], hazy)
    assert synth.get_params()["patch_size"] == 7
    drawn = HazeSynthesizer(random_state=1).fit().transform_one(J, depth)[1].beta
    assert drawn in (1.0, 2.0, 3.0, 4.0, 5.0)


def test_denser_haze_moves_image_further(rng):
    J = rng.random((24, 24, 3))
    depth = rng.uniform(1, 50, (24, 24))
    diffs = [np.abs(HazeSynthesizer(beta=b, patch_size=7).transform_one(J, depth)[0] - J).mean() for b in (1, 5)]
    assert diffs[1] > diffs[0]


def test_synthesize_dataset_deterministic(shapes_small, tmp_path):
    clear = shapes_small["clear"]
    a = synthesize_dataset(clear, tmp_path / "a", seed=7)
    b = synthesize_dataset(clear, tmp_path / "b", seed=7)
    assert (tmp_path / "a" / "manifest.json").read_text() == (tmp_path / "b" / "manifest.json").read_text()
    assert (tmp_path / "a" / "provenance.jsonl").read_bytes() == (tmp_path / "b" / "provenance.jsonl").read_bytes()
    for e in a.manifest.entries:
        assert np.array_equal(load_image(a.manifest.image_path(e)), load_image(b.manifest.image_path(e)))
    prov = [json.loads(x) for x in (tmp_path / "a" / "provenance.jsonl").read_text().splitlines()]
    assert len(prov) == len(clear.entries)
    assert {"beta", "A", "clamp_ratio", "seed"} <= set(prov[0])
    assert all(0 <= ann.degradation <= 1 for _, ann in a.manifest.objects())


def test_synthesize_empty_and_missing_depth(shapes_small, tmp_path):
    empty = DatasetManifest([], ["x"], root=tmp_path)
    res = synthesize_dataset(empty, tmp_path / "e")
    assert res.manifest.entries == [] and res.provenance == []
    clear = shapes_small["clear"]
    entries = [*clear.entries]
    entries[0] = type(entries[0])(**{**entries[0].__dict__, "depth_path": None})
    m = DatasetManifest(entries, clear.class_names, root=clear.root)
    res = synthesize_dataset(m, tmp_path / "m")
    assert [s["image_id"] for s in res.skipped] == [entries[0].image_id]
    assert len(res.manifest.entries) == len(entries) - 1
