"""Finite-difference gradient suite over every trainable block, at small 64-bit sizes."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .cmke import KnowledgeEnhancer
from .extractor import PatchConfig, VisualExtractor
from .generator import ReportGenerator
from .gradcheck import GradCheckReport, finite_diff_check
from .kan import KANLayer
from .mvpa import MVPA
from .nn import ProjectionTriple, normal, view_aware_attention
from .tensor import Tensor
from .train import nll_loss


def _readout(rng: np.random.Generator, shape) -> Tensor:
    """Fixed random weights that turn a block output into a scalar loss."""
    return Tensor(rng.standard_normal(shape))


def _kan(rng):
    layer = KANLayer(5, 4, rng)
    x = Tensor(rng.uniform(-0.9, 0.9, size=(3, 5)), requires_grad=True)
    w = _readout(rng, (3, 4))
    params = {"x": x, **dict(layer.named_parameters())}
    return lambda: (layer(x) * w).sum(), params


def _view_attention(rng):
    n, d_k = 5, 6
    proj = ProjectionTriple(8, d_k, 8, rng)
    e_v = normal(rng, (n, d_k), 0.3)
    x = Tensor(rng.standard_normal((n, 8)), requires_grad=True)
    w = _readout(rng, (n, 8))

    def loss():
        q, k, v = proj.project(x)
        return (view_aware_attention(q, k, v, e_v, "axial") * w).sum()

    return loss, {"x": x, "E_v": e_v, **dict(proj.named_parameters())}


def _mvpa(rng):
    n, d = 4, 8
    block = MVPA(n, d, rng)
    tokens = {v: Tensor(rng.standard_normal((n, d)), requires_grad=True) for v in ("axial", "coronal", "sagittal")}
    w = _readout(rng, (n, d))
    params = {f"tokens.{v}": t for v, t in tokens.items()}
    params.update(block.named_parameters())
    return lambda: (block(tokens) * w).sum(), params


def _cmke(rng):
    n, d, d_e, k = 4, 8, 6, 3
    block = KnowledgeEnhancer(d, d_e, rng)
    z = Tensor(rng.standard_normal((n, d)), requires_grad=True)
    z_topk = Tensor(rng.standard_normal((k, d_e)))
    w = _readout(rng, (n, d))
    return lambda: (block(z, z_topk) * w).sum(), {"z_axial": z, **dict(block.named_parameters())}


def _extractor(rng):
    dims = (8, 8, 8)
    ext = VisualExtractor(dims, PatchConfig(4, 4, 4, 8), rng, spatial_layers=1, causal_layers=1)
    volume = rng.uniform(0, 1, size=dims)
    ws = {v: _readout(rng, (8, 8)) for v in ext.views}

    def loss():
        out = ext(volume)
        total = None
        for v in ext.views:
            term = (out[v].tokens * ws[v]).sum()
            total = term if total is None else total + term
        return total

    return loss, dict(ext.named_parameters())


def _generator(rng):
    vocab, d = 11, 8
    gen = ReportGenerator(vocab, d, rng, memory_slots=4, layers=1)
    source = Tensor(rng.standard_normal((5, d)), requires_grad=True)
    inputs = np.array([[1, 5, 7, 4, 9]])
    targets = np.array([[5, 7, 4, 9, 2]])
    params = {"source": source, **dict(gen.named_parameters())}
    return lambda: nll_loss(gen.decode(gen.encode(source), inputs), targets), params


SUITE: dict[str, Callable] = {
    "kan": _kan,
    "view_aware_attention": _view_attention,
    "mvpa": _mvpa,
    "cmke": _cmke,
    "extractor": _extractor,
    "generator": _generator,
}


def run_gradchecks(names=None, n_samples: int = 60, seed: int = 0, step: float = 1e-5,
                   tolerance: float = 1e-4) -> dict[str, GradCheckReport]:
    reports = {}
    for name in names or SUITE:
        if name not in SUITE:
            raise KeyError(f"unknown gradcheck target '{name}'; choose from {sorted(SUITE)}")
        rng = np.random.default_rng(seed)
        with T.default_dtype(np.float64):
            loss, params = SUITE[name](rng)
            reports[name] = finite_diff_check(loss, params, step, tolerance, n_samples, rng)
    return reports
