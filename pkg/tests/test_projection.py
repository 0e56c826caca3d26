import numpy as np
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ctflow import tensor as T
from ctflow.projection import (
    DEPTH,
    PROJECTORS,
    WIDTH,
    Projection,
    project_depth,
    project_depth_adjoint,
    project_width,
    project_width_adjoint,
)
from ctflow.tensor import Tensor

from conftest import central_diff, rel_err

volumes = arrays(np.float64, (3, 4, 5, 1), elements=st.floats(0, 255))


def test_constant_volume():
    y = np.full((4, 5, 6, 1), 42.0)
    np.testing.assert_array_equal(project_depth(y), np.full((5, 6), 42.0))
    np.testing.assert_array_equal(project_width(y), np.full((4, 5), 42.0))


def test_single_bright_slice():
    y = np.zeros((32, 8, 8, 1))
    y[5] = 255.0
    np.testing.assert_allclose(project_depth(y), 255.0 / 32, rtol=1e-15)
    assert abs(255.0 / 32 - 7.969) < 1e-3


@given(volumes, volumes, st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(y1, y2, a, b):
    for proj in (project_depth, project_width):
        np.testing.assert_allclose(proj(a * y1 + b * y2), a * proj(y1) + b * proj(y2), atol=1e-9)


@given(volumes)
def test_width_depth_symmetry(y):
    swapped = np.transpose(y, (2, 1, 0, 3))  # d <-> w
    np.testing.assert_allclose(project_width(swapped), project_depth(y).T, rtol=1e-14)


@given(volumes)
def test_mean_preservation(y):
    for proj in (project_depth, project_width):
        assert abs(proj(y).mean() - y.mean()) <= 1e-12 * max(abs(y.mean()), 1.0)


def test_adjoints():
    rng = np.random.default_rng(0)
    y = rng.uniform(0, 255, (3, 4, 5, 1))
    xd = rng.uniform(0, 255, (4, 5))
    xw = rng.uniform(0, 255, (3, 4))
    lhs, rhs = np.sum(project_depth(y) * xd), np.sum(y * project_depth_adjoint(xd, 3))
    assert abs(lhs - rhs) <= 1e-12 * abs(lhs)
    lhs, rhs = np.sum(project_width(y) * xw), np.sum(y * project_width_adjoint(xw, 5))
    assert abs(lhs - rhs) <= 1e-12 * abs(lhs)


def test_width_loss_gradient():
    rng = np.random.default_rng(1)
    y = rng.uniform(0, 255, (3, 4, 5, 1))
    x = rng.uniform(0, 255, (3, 4))
    leaf = Tensor(y, requires_grad=True)
    T.sq_norm(project_width(leaf) - x).backward()
    for i in rng.choice(y.size, 20, replace=False):
        fd = central_diff(lambda v: float(np.sum((project_width(v) - x) ** 2)), y, i)
        assert rel_err(leaf.grad.reshape(-1)[i], fd) <= 1e-6


def test_tensor_and_array_paths_agree():
    y = np.random.default_rng(2).uniform(0, 255, (2, 4, 4, 4, 1))
    for plane, proj in PROJECTORS.items():
        np.testing.assert_array_equal(proj(Tensor(y)).data, proj(y))
    assert project_depth(y).shape == (2, 4, 4)


def test_projection_plane_tag():
    p = Projection(np.zeros((4, 4)), DEPTH)
    assert p.shape == (4, 4)
    Projection(np.zeros((4, 4)), WIDTH)
    try:
        Projection(np.zeros((4, 4)), "axial")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown plane accepted")
