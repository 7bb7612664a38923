"""Multi-view perception aggregator.

Each view runs view-aware self-attention over its own tokens followed by a
residual + norm; the three results are concatenated on the feature axis in
the order axial, sagittal, coronal and fused back to width D.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .kan import SplineGrid, fusion_layer
from .nn import LayerNorm, Module, ProjectionTriple, normal, view_aware_attention
from .tensor import DimensionError, Tensor

CONCAT_ORDER = ("axial", "sagittal", "coronal")


class MVPA(Module):
    def __init__(self, n_tokens: int, d_model: int, rng: np.random.Generator, d_k: int | None = None,
                 fusion: str = "kan", grid: SplineGrid | None = None, view_embedding_std: float = 0.02):
        d_k = d_k or d_model
        self.d_model = d_model
        self.proj = {v: ProjectionTriple(d_model, d_k, d_model, rng) for v in CONCAT_ORDER}
        self.view_embedding = {v: normal(rng, (n_tokens, d_k), view_embedding_std) for v in CONCAT_ORDER}
        self.branch_norm = LayerNorm(d_model)
        self.fusion = fusion_layer(fusion, 3 * d_model, d_model, rng, grid)
        self.out_norm = LayerNorm(d_model)

    def view_branch(self, tokens: Tensor, view: str, return_weights: bool = False):
        """Norm(ViewAwareAttention(Z W_q, Z W_k, Z W_v, E_v) + Z)."""
        if tokens.shape[-1] != self.d_model:
            raise DimensionError(f"view '{view}': token width {tokens.shape[-1]} != {self.d_model}")
        q, k, v = self.proj[view].project(tokens)
        attended, weights = view_aware_attention(q, k, v, self.view_embedding[view], view, return_weights=True)
        out = self.branch_norm(attended + tokens)
        return (out, weights) if return_weights else out

    def aggregate(self, an_axial: Tensor, an_sagittal: Tensor, an_coronal: Tensor) -> Tensor:
        """Norm(Fusion([AN_a; AN_s; AN_c])) with concatenation along features."""
        if not (an_axial.shape == an_sagittal.shape == an_coronal.shape):
            raise DimensionError(
                f"branch shapes differ: {an_axial.shape}, {an_sagittal.shape}, {an_coronal.shape}")
        fused = self.fusion(T.concat([an_axial, an_sagittal, an_coronal], axis=-1))
        return self.out_norm(fused)

    def forward(self, tokens: dict[str, Tensor]) -> Tensor:
        branches = {v: self.view_branch(tokens[v], v) for v in CONCAT_ORDER}
        return self.aggregate(*(branches[v] for v in CONCAT_ORDER))
