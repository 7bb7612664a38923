"""Kolmogorov-Arnold layers built from cubic B-spline edge functions.

Each edge (i, j) carries ``phi_ij(t) = w_base[i, j] * silu(t) + w_spline[i, j] * sum_g c[i, j, g] B_g(t)``
and output node j sums its incoming edges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Module, normal, parameter, zeros
from .tensor import DimensionError, Tensor


@dataclass(frozen=True)
class SplineGrid:
    lo: float = -1.0
    hi: float = 1.0
    intervals: int = 8
    degree: int = 3
    knots: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"grid domain must satisfy lo < hi, got [{self.lo}, {self.hi}]")
        if self.intervals < 1 or self.degree < 0:
            raise ValueError("grid needs intervals >= 1 and degree >= 0")
        h = (self.hi - self.lo) / self.intervals
        knots = self.lo + h * np.arange(-self.degree, self.intervals + self.degree + 1, dtype=np.float64)
        object.__setattr__(self, "knots", knots)

    @property
    def n_basis(self) -> int:
        return self.intervals + self.degree

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / self.intervals


def _cox_de_boor(x: np.ndarray, grid: SplineGrid, degree: int) -> np.ndarray:
    """All degree-``degree`` bases on ``grid.knots`` at (already clamped) ``x``; shape x.shape + (n,)."""
    t = grid.knots.astype(x.dtype)
    k = grid.degree
    n0 = grid.intervals + 2 * k
    cell = np.clip(np.floor((x - grid.lo) / grid.step).astype(np.int64), 0, grid.intervals - 1)
    basis = np.zeros(x.shape + (n0,), dtype=x.dtype)
    np.put_along_axis(basis, (cell + k)[..., None], 1.0, axis=-1)
    xe = x[..., None]
    for p in range(1, degree + 1):
        n = n0 - p
        left = (xe - t[:n]) / (t[p:p + n] - t[:n]) * basis[..., :n]
        right = (t[p + 1:p + 1 + n] - xe) / (t[p + 1:p + 1 + n] - t[1:1 + n]) * basis[..., 1:n + 1]
        basis = left + right
    return basis


def bspline_basis(x, grid: SplineGrid) -> np.ndarray:
    """Values of the ``G + k`` B-spline bases at ``x`` (scalar or array), inputs clamped to the domain."""
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    x = np.clip(x, grid.lo, grid.hi)
    return _cox_de_boor(x, grid, grid.degree)


def bspline_basis_derivative(x: np.ndarray, grid: SplineGrid) -> np.ndarray:
    """d/dx of every basis; zero for inputs outside the (clamping) domain."""
    k = grid.degree
    xc = np.clip(x, grid.lo, grid.hi)
    if k == 0:
        return np.zeros(x.shape + (grid.n_basis,), dtype=x.dtype)
    lower = _cox_de_boor(xc, grid, k - 1)
    t = grid.knots.astype(x.dtype)
    n = grid.n_basis
    deriv = (k / (t[k:k + n] - t[:n])) * lower[..., :n] - (k / (t[k + 1:k + 1 + n] - t[1:1 + n])) * lower[..., 1:n + 1]
    inside = (x >= grid.lo) & (x <= grid.hi)
    return deriv * inside[..., None]


def spline_features(x: Tensor, grid: SplineGrid) -> Tensor:
    """Differentiable basis expansion: (..., n) -> (..., n, G + k)."""
    xd = x.data
    values = bspline_basis(xd, grid).astype(xd.dtype)

    def backward(g):
        return ((g * bspline_basis_derivative(xd, grid)).sum(axis=-1),)

    return T.make_op(values, (x,), backward, "bspline")


def kan_param_count(n_in: int, n_out: int, intervals: int, degree: int) -> int:
    """Trainable scalars of one layer: G + k coefficients plus base and spline weights per edge."""
    return n_in * n_out * (intervals + degree + 2)


class KANLayer(Module):
    namespace = "kan"

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, grid: SplineGrid | None = None):
        self.grid = grid or SplineGrid()
        self.n_in, self.n_out = n_in, n_out
        self.coef = normal(rng, (n_in, n_out, self.grid.n_basis), 0.1 / math.sqrt(n_in))
        self.w_base = normal(rng, (n_in, n_out), 1.0 / math.sqrt(n_in))
        self.w_spline = parameter(np.ones((n_in, n_out)))

    def forward(self, x: Tensor) -> Tensor:
        return kan_forward(x, self)


def kan_forward(x: Tensor, layer: KANLayer) -> Tensor:
    if x.shape[-1] != layer.n_in:
        raise DimensionError(f"KAN layer expects last dim {layer.n_in}, got shape {x.shape}")
    n_in, n_out, nb = layer.n_in, layer.n_out, layer.grid.n_basis
    lead = x.shape[:-1]
    base = T.silu(x) @ layer.w_base
    feats = spline_features(x, layer.grid).reshape(*lead, n_in * nb)
    scale = T.expand(layer.w_spline.reshape(n_in, n_out, 1), (n_in, n_out, nb))
    weights = (layer.coef * scale).transpose(0, 2, 1).reshape(n_in * nb, n_out)
    return base + feats @ weights


class KANStack(Module):
    def __init__(self, widths, rng: np.random.Generator, grid: SplineGrid | None = None):
        widths = list(widths)
        if len(widths) < 2:
            raise ValueError("a KAN stack needs at least an input and an output width")
        self.widths = widths
        self.layers = [KANLayer(a, b, rng, grid) for a, b in zip(widths[:-1], widths[1:])]

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def expected_param_count(self) -> int:
        g = self.layers[0].grid
        return sum(kan_param_count(a, b, g.intervals, g.degree) for a, b in zip(self.widths[:-1], self.widths[1:]))


ACTIVATIONS = {"identity": T.identity, "silu": T.silu, "relu": T.relu, "gelu": T.gelu, "tanh": T.tanh}


def mlp_layer_forward(x: Tensor, weights: Tensor, bias: Tensor, activation="silu") -> Tensor:
    if x.shape[-1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise DimensionError(f"MLP layer: input {x.shape}, weights {weights.shape}, bias {bias.shape}")
    act = ACTIVATIONS[activation] if isinstance(activation, str) else activation
    return act(x @ weights + bias)


class MLPLayer(Module):
    """Drop-in replacement for ``KANLayer`` used by the MLP ablation."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, activation: str = "silu"):
        self.n_in, self.n_out = n_in, n_out
        self.activation = activation
        self.weight = normal(rng, (n_in, n_out), 1.0 / math.sqrt(n_in))
        self.bias = zeros((n_out,))

    def forward(self, x: Tensor) -> Tensor:
        return mlp_layer_forward(x, self.weight, self.bias, self.activation)


def mlp_param_count(n_in: int, n_out: int) -> int:
    return n_in * n_out + n_out


def fusion_layer(kind: str, n_in: int, n_out: int, rng: np.random.Generator, grid: SplineGrid | None = None):
    if kind == "kan":
        return KANLayer(n_in, n_out, rng, grid)
    if kind == "mlp":
        return MLPLayer(n_in, n_out, rng)
    raise ValueError(f"unknown fusion kind '{kind}' (expected 'kan' or 'mlp')")
