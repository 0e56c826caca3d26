import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ctflow import layers
from ctflow import tensor as T
from ctflow.tensor import Tensor

from conftest import central_diff, jacobian_fd, rel_err


def tens(d):
    return {k: Tensor(v) for k, v in d.items()}


def coupling_params(c, width, seed, scale=0.3):
    rng = np.random.default_rng(seed)
    p = layers.coupling_init(c, width, rng)
    p["w3"] = scale * rng.standard_normal(p["w3"].shape)
    p["b3"] = scale * rng.standard_normal(p["b3"].shape)
    return p


def brute_logdet(layer, x):
    """log|det| of the numerically assembled Jacobian of a single-sample layer map."""
    jac = jacobian_fd(lambda v: layer(Tensor(v))[0].data, x)
    return np.linalg.slogdet(jac)[1]


# -- actnorm ------------------------------------------------------------------------
def test_actnorm_identity():
    x = np.random.default_rng(0).standard_normal((1, 2, 2, 2, 3))
    y, ld = layers.actnorm(Tensor(x), tens({"bias": np.zeros(3), "logs": np.zeros(3)}))
    np.testing.assert_array_equal(y.data, x)
    assert float(ld.data) == 0.0


def test_actnorm_scale_two_logdet():
    x = np.ones((1, 2, 2, 2, 1))
    _, ld = layers.actnorm(Tensor(x), tens({"bias": np.zeros(1), "logs": np.log([2.0])}))
    assert abs(float(ld.data) - 8 * math.log(2)) < 1e-12
    assert abs(float(ld.data) - 5.545) < 1e-3


def test_actnorm_data_init():
    rng = np.random.default_rng(1)
    x = 3.0 + 5.0 * rng.standard_normal((4, 3, 3, 3, 5))
    p = layers.actnorm_init(x)
    y, _ = layers.actnorm(Tensor(x), tens(p))
    flat = y.data.reshape(-1, 5)
    assert np.all(np.abs(flat.mean(axis=0)) <= 1e-6)
    assert np.all(np.abs(flat.var(axis=0) - 1.0) <= 1e-6)
    assert np.all(np.exp(p["logs"]) > 0)


# -- invertible 1x1x1 conv --------------------------------------------------------
def test_inv_conv_identity_and_scaled():
    x = np.random.default_rng(0).standard_normal((1, 2, 2, 2, 4))
    y, ld = layers.inv_conv(Tensor(x), tens({"weight": np.eye(4)}))
    np.testing.assert_array_equal(y.data, x)
    assert float(ld.data) == 0.0
    _, ld = layers.inv_conv(Tensor(x), tens({"weight": 2 * np.eye(4)}))
    assert abs(float(ld.data) - 32 * math.log(2)) < 1e-12
    assert abs(float(ld.data) - 22.181) < 1e-3


def test_inv_conv_logdet_matches_brute_jacobian():
    rng = np.random.default_rng(2)
    w = rng.standard_normal((2, 2))
    x = rng.standard_normal((1, 2, 2, 2, 2))
    p = tens({"weight": w})
    analytic = float(layers.inv_conv(Tensor(x), p)[1].data)
    assert rel_err(analytic, brute_logdet(lambda v: layers.inv_conv(v, p), x)) <= 1e-6


def test_inv_conv_errors():
    x = Tensor(np.ones((1, 2, 2, 2, 2)))
    with pytest.raises(layers.SingularWeightError):
        layers.inv_conv(x, tens({"weight": np.array([[1.0, 2.0], [2.0, 4.0]])}))
    with pytest.raises(layers.SingularWeightError):
        layers.inv_conv(x, tens({"weight": 1e-7 * np.eye(2)}))
    with pytest.raises(layers.LayerShapeError):
        layers.inv_conv(x, tens({"weight": np.eye(3)}))


# -- affine coupling ----------------------------------------------------------------
def test_coupling_closed_form_scale():
    p = layers.coupling_init(2, 4, np.random.default_rng(0))
    p["b3"] = np.array([0.1, 0.0])  # h = 0.1, t = 0
    x = np.random.default_rng(1).standard_normal((1, 2, 2, 2, 2))
    y, ld = layers.affine_coupling(Tensor(x), tens(p))
    np.testing.assert_allclose(y.data[..., 1], 1.1 * x[..., 1], rtol=1e-15)
    np.testing.assert_array_equal(y.data[..., 0], x[..., 0])
    assert abs(float(ld.data[0]) - 8 * math.log(1.1)) < 1e-12
    assert abs(float(ld.data[0]) - 0.7625) < 1e-4


def test_coupling_zero_init_scale():
    p = layers.coupling_init(4, 8, np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((1, 2, 2, 2, 4))
    y, _ = layers.affine_coupling(Tensor(x), tens(p))
    expected = 1.0 / (1.0 + math.exp(0.1)) + 0.6
    assert abs(expected - 1.0750) < 1e-4
    np.testing.assert_allclose(y.data[..., 2:] / x[..., 2:], expected, rtol=1e-12)


@given(st.integers(0, 10_000))
def test_coupling_round_trip(seed):
    p = tens(coupling_params(4, 6, seed))
    x = np.random.default_rng(seed).standard_normal((2, 2, 2, 2, 4))
    y, ld = layers.affine_coupling(Tensor(x), p)
    back, ld_rev = layers.affine_coupling(y, p, reverse=True)
    assert np.max(np.abs(back.data - x)) <= 1e-10
    np.testing.assert_allclose(ld_rev.data, -ld.data, rtol=1e-12)


def test_coupling_odd_channels():
    with pytest.raises(layers.LayerShapeError):
        layers.affine_coupling(Tensor(np.ones((1, 2, 2, 2, 3))), tens(layers.coupling_init(4, 4, np.random.default_rng(0))))


# -- squeeze --------------------------------------------------------------------------
def test_squeeze_shapes_and_round_trip():
    x = np.random.default_rng(0).standard_normal((1, 4, 4, 4, 1))
    s = layers.squeeze3d(Tensor(x))
    assert s.shape == (1, 2, 2, 2, 8)
    np.testing.assert_array_equal(layers.squeeze3d(s, reverse=True).data, x)
    # the first output channel at block (0,0,0) holds voxel (0,0,0); the last holds (1,1,1)
    assert s.data[0, 0, 0, 0, 0] == x[0, 0, 0, 0, 0]
    assert s.data[0, 0, 0, 0, 7] == x[0, 1, 1, 1, 0]


def test_squeeze_full_size_shape():
    t = Tensor(np.zeros((1, 32, 32, 32, 1)))
    for _ in range(4):
        t = layers.squeeze3d(t)
    assert t.shape == (1, 2, 2, 2, 4096)


def test_squeeze_odd_dims():
    with pytest.raises(layers.LayerShapeError):
        layers.squeeze3d(Tensor(np.zeros((1, 3, 4, 4, 1))))
    with pytest.raises(layers.LayerShapeError):
        layers.squeeze3d(Tensor(np.zeros((1, 2, 2, 2, 3))), reverse=True)


# -- split and priors ---------------------------------------------------------------
def test_zero_head_prior_is_standard_normal():
    x = Tensor(np.zeros((1, 2, 2, 2, 512)))  # factored half has 8 * 256 = 2048 dims
    _, z, lp = layers.split_prior(x, tens(layers.split_prior_init(512)))
    assert z.size == 2048
    assert abs(float(lp.data[0]) - (-1024 * math.log(2 * math.pi))) < 1e-9
    assert abs(float(lp.data[0]) + 1881.99) < 0.01


def test_split_merge_identity():
    rng = np.random.default_rng(0)
    p = layers.split_prior_init(4)
    p["w"] = 0.1 * rng.standard_normal(p["w"].shape)
    p["b"] = 0.1 * rng.standard_normal(p["b"].shape)
    p = tens(p)
    x = rng.standard_normal((2, 2, 2, 2, 4))
    kept, z, lp = layers.split_prior(Tensor(x), p)
    merged, lp2 = layers.merge_prior(kept, z, p)
    np.testing.assert_array_equal(merged.data, x)
    np.testing.assert_array_equal(lp.data, lp2.data)


def test_prior_at_mode():
    rng = np.random.default_rng(0)
    mean = rng.standard_normal((1, 2, 2, 2, 3))
    logs = 0.2 * rng.standard_normal((1, 2, 2, 2, 3))
    lp = layers.gaussian_logp(Tensor(mean), Tensor(mean), Tensor(logs))
    expected = -12 * math.log(2 * math.pi) - logs.sum()
    assert abs(float(lp.data[0]) - expected) < 1e-12


def test_split_odd_channels():
    with pytest.raises(layers.LayerShapeError):
        layers.split_prior(Tensor(np.zeros((1, 2, 2, 2, 3))), None)


def test_merge_samples_with_temperature_zero_at_mean():
    rng = np.random.default_rng(0)
    p = layers.split_prior_init(4)
    p["b"] = rng.standard_normal(4)
    kept = Tensor(rng.standard_normal((1, 2, 2, 2, 2)))
    merged, _ = layers.merge_prior(kept, None, tens(p), temperature=0.0, rng=rng)
    mean, _ = layers.prior_head(kept, tens(p))
    np.testing.assert_allclose(merged.data[..., 2:], mean.data)


# -- generic properties on tiny shapes -----------------------------------------------
def _tiny_layers(seed):
    rng = np.random.default_rng(seed)
    an = tens({"bias": rng.standard_normal(2), "logs": 0.3 * rng.standard_normal(2)})
    ic = tens({"weight": rng.standard_normal((2, 2))})
    cp = tens(coupling_params(2, 3, seed))
    return {
        "actnorm": lambda v, r=False: layers.actnorm(v, an, r),
        "inv_conv": lambda v, r=False: layers.inv_conv(v, ic, r),
        "coupling": lambda v, r=False: layers.affine_coupling(v, cp, r),
        "squeeze": lambda v, r=False: (layers.squeeze3d(v, r), Tensor(0.0)),
    }


@pytest.mark.parametrize("name", ["actnorm", "inv_conv", "coupling", "squeeze"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_layer_round_trip_and_brute_logdet(name, seed):
    layer = _tiny_layers(seed)[name]
    x = np.random.default_rng(seed + 10).standard_normal((1, 2, 2, 2, 2))  # 16 elements
    y, ld = layer(Tensor(x))
    back, ld_rev = layer(y, True)
    assert np.max(np.abs(back.data - x)) <= 1e-8
    analytic = float(np.sum(ld.data))
    assert abs(analytic + float(np.sum(ld_rev.data))) <= 1e-12
    brute = brute_logdet(lambda v: layer(v), x)
    if name == "squeeze":
        assert analytic == 0.0 and abs(brute) < 1e-9
    else:
        assert rel_err(analytic, brute) <= 1e-5


def test_layer_param_gradients():
    rng = np.random.default_rng(7)
    x = Tensor(rng.standard_normal((1, 2, 2, 2, 4)))
    cases = {
        "actnorm": ({"bias": rng.standard_normal(4), "logs": 0.2 * rng.standard_normal(4)}, layers.actnorm),
        "inv_conv": ({"weight": np.eye(4) + 0.3 * rng.standard_normal((4, 4))}, layers.inv_conv),
        "coupling": (coupling_params(4, 3, 5), layers.affine_coupling),
    }
    probe = rng.uniform(0.5, 1.5, size=x.shape)
    for name, (params, fn) in cases.items():
        def scalar(pdict):
            y, ld = fn(x, tens(pdict))
            return float(np.sum(y.data * probe) + np.sum(ld.data))

        leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
        y, ld = fn(x, leaves)
        T.tsum(T.tsum(y * probe) + T.tsum(ld)).backward()
        for key, arr in params.items():
            for i in np.random.default_rng(1).choice(arr.size, min(arr.size, 6), replace=False):
                def f(v, key=key):
                    return scalar({**params, key: v})

                fd = central_diff(f, arr, i)
                assert rel_err(leaves[key].grad.reshape(-1)[i], fd, floor=1e-6) <= 1e-4, (name, key, i)
