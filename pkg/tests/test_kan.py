import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import BSpline

from ctreport.gradcheck import finite_diff_check
from ctreport.kan import (KANLayer, KANStack, MLPLayer, SplineGrid, bspline_basis, bspline_basis_derivative,
                          fusion_layer, kan_param_count, mlp_param_count)
from ctreport.tensor import DimensionError, Tensor


def recursive_basis(i, p, x, t):
    """Textbook Cox-de Boor, one basis at a time, half-open support."""
    if p == 0:
        return 1.0 if t[i] <= x < t[i + 1] else 0.0
    left = 0.0 if t[i + p] == t[i] else (x - t[i]) / (t[i + p] - t[i]) * recursive_basis(i, p - 1, x, t)
    right = 0.0 if t[i + p + 1] == t[i + 1] else \
        (t[i + p + 1] - x) / (t[i + p + 1] - t[i + 1]) * recursive_basis(i + 1, p - 1, x, t)
    return left + right


def test_knot_vector_layout():
    g = SplineGrid(-1.0, 1.0, 8, 3)
    assert len(g.knots) == 8 + 2 * 3 + 1
    assert g.n_basis == 11
    np.testing.assert_allclose(np.diff(g.knots), 0.25)
    assert g.knots[3] == -1.0 and g.knots[-4] == 1.0


@pytest.mark.parametrize("intervals", [4, 8, 16])
def test_basis_matches_scipy(intervals):
    g = SplineGrid(-1.0, 1.0, intervals, 3)
    x = np.linspace(-0.999, 0.999, 57)
    ref = BSpline.design_matrix(x, g.knots, 3).toarray()
    np.testing.assert_allclose(bspline_basis(x, g), ref, atol=1e-12)


def test_basis_matches_scalar_recursion():
    g = SplineGrid(-1.0, 1.0, 8, 3)
    for x in np.linspace(-0.95, 0.95, 23):
        ref = [recursive_basis(i, 3, x, g.knots) for i in range(g.n_basis)]
        np.testing.assert_allclose(bspline_basis(x, g), ref, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(-1.0, 1.0), st.sampled_from([4, 8, 16, 32]))
def test_partition_of_unity(x, intervals):
    b = bspline_basis(x, SplineGrid(-1.0, 1.0, intervals, 3))
    assert b.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(b >= -1e-15)
    assert np.count_nonzero(b > 1e-15) <= 4  # local support: k + 1 bases


def test_inputs_are_clamped():
    g = SplineGrid()
    np.testing.assert_allclose(bspline_basis(5.0, g), bspline_basis(1.0, g))
    np.testing.assert_allclose(bspline_basis(-7.0, g), bspline_basis(-1.0, g))
    assert np.all(bspline_basis_derivative(np.array([3.0]), g) == 0)


def test_integer_inputs_accepted():
    np.testing.assert_allclose(bspline_basis(np.array([0, 1]), SplineGrid()),
                               bspline_basis(np.array([0.0, 1.0]), SplineGrid()))


def test_basis_derivative_matches_scipy():
    g = SplineGrid(-1.0, 1.0, 8, 3)
    x = np.linspace(-0.97, 0.97, 31)
    ref = np.stack([BSpline(g.knots, np.eye(g.n_basis)[i], 3).derivative()(x) for i in range(g.n_basis)], -1)
    np.testing.assert_allclose(bspline_basis_derivative(x, g), ref, atol=1e-10)


def edge_loop_oracle(x, layer):
    """y_j = sum_i w_base * silu(x_i) + w_spline * sum_m c_m B_m(x_i), one edge at a time."""
    g = layer.grid
    out = np.zeros((x.shape[0], layer.n_out))
    for b in range(x.shape[0]):
        for j in range(layer.n_out):
            for i in range(layer.n_in):
                xi = x[b, i]
                silu = xi / (1 + math.exp(-xi))
                basis = [recursive_basis(m, g.degree, min(max(xi, g.lo), g.hi - 1e-15), g.knots)
                         for m in range(g.n_basis)]
                spline = sum(c * bm for c, bm in zip(layer.coef.data[i, j], basis))
                out[b, j] += layer.w_base.data[i, j] * silu + layer.w_spline.data[i, j] * spline
    return out


def test_kan_forward_matches_edge_oracle(f64, rng):
    layer = KANLayer(3, 2, rng)
    layer.w_spline.data = rng.uniform(0.5, 1.5, size=(3, 2))
    x = rng.uniform(-1.3, 1.3, size=(4, 3))
    np.testing.assert_allclose(layer(Tensor(x)).data, edge_loop_oracle(x, layer), atol=1e-12)


def test_kan_full_gradcheck(f64, rng):
    layer = KANLayer(3, 2, rng)
    x = Tensor(rng.uniform(-0.9, 0.9, size=(4, 3)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 2)))
    params = {"x": x, **dict(layer.named_parameters())}
    report = finite_diff_check(lambda: (layer(x) * w).sum(), params, n_samples=None)
    assert report.passed, report.summary()


def test_kan_param_names_are_namespaced(rng):
    stack = KANStack([3, 4, 2], rng)
    names = [n for n, _ in stack.named_parameters()]
    assert names[0].startswith("kan.layers.0.")


@pytest.mark.parametrize("intervals", [4, 8, 16, 32])
def test_param_count_formula(intervals, rng):
    layer = KANLayer(5, 3, rng, SplineGrid(-1.0, 1.0, intervals, 3))
    assert layer.num_parameters() == kan_param_count(5, 3, intervals, 3) == 5 * 3 * (intervals + 5)


def test_stack_count_sums_layers(rng):
    stack = KANStack([6, 4, 3], rng)
    assert stack.num_parameters() == stack.expected_param_count() == 6 * 4 * 13 + 4 * 3 * 13


def test_mlp_layer(rng):
    layer = MLPLayer(6, 4, rng)
    assert layer.num_parameters() == mlp_param_count(6, 4) == 28
    x = rng.standard_normal((2, 6)).astype(np.float32)
    z = x @ layer.weight.data + layer.bias.data
    np.testing.assert_allclose(layer(Tensor(x)).data, z / (1 + np.exp(-z)), rtol=1e-5)


def test_fusion_layer_kinds(rng):
    assert isinstance(fusion_layer("kan", 3, 2, rng), KANLayer)
    assert isinstance(fusion_layer("mlp", 3, 2, rng), MLPLayer)
    with pytest.raises(ValueError):
        fusion_layer("rbf", 3, 2, rng)


def test_width_mismatch(rng):
    with pytest.raises(DimensionError):
        KANLayer(3, 2, rng)(Tensor(np.ones((1, 4))))
