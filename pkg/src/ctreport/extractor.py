"""Per-view CT token extraction: view transposition, 3D patches, spatial + causal transformers.

Volumes are plain numpy arrays of shape (d, h, w) or (B, d, h, w). Tokens
come out temporal-major: token index ``t * (n_h * n_w) + i * n_w + j``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import EncoderLayer, LayerNorm, Linear, Module, causal_mask, normal
from .tensor import Tensor

VIEWS = ("axial", "coronal", "sagittal")

# axis order of the permuted volume, expressed in terms of the input (d, h, w)
_PERMUTATIONS = {
    "axial": (0, 1, 2),     # d x h x w
    "sagittal": (1, 0, 2),  # h x d x w
    "coronal": (1, 2, 0),   # h x w x d
}


class ConfigError(ValueError):
    """Raised for inconsistent volume / patch configuration."""


@dataclass(frozen=True)
class PatchConfig:
    patch_t: int = 8
    patch_h: int = 8
    patch_w: int = 8
    dim: int = 64

    def __post_init__(self):
        if min(self.patch_t, self.patch_h, self.patch_w, self.dim) <= 0:
            raise ConfigError(f"patch sizes and width must be positive: {self}")

    @property
    def patch_volume(self) -> int:
        return self.patch_t * self.patch_h * self.patch_w

    def grid(self, dims: tuple[int, int, int]) -> tuple[int, int, int]:
        for axis, size, patch in zip("dhw", dims, (self.patch_t, self.patch_h, self.patch_w)):
            if size % patch:
                raise ConfigError(f"axis '{axis}' has size {size}, not divisible by patch size {patch}")
        return dims[0] // self.patch_t, dims[1] // self.patch_h, dims[2] // self.patch_w

    def token_count(self, dims: tuple[int, int, int]) -> int:
        n_t, n_h, n_w = self.grid(dims)
        return n_t * n_h * n_w


@dataclass
class ViewTokenSet:
    tokens: Tensor  # (B, N_p, D)
    view: str
    grid_shape: tuple[int, int, int]

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[-2]


def _check_view(view: str) -> None:
    if view not in _PERMUTATIONS:
        raise ValueError(f"unknown view '{view}' (expected one of {VIEWS})")


def transpose_to_view(volume: np.ndarray, view: str) -> np.ndarray:
    """Permute the trailing (d, h, w) axes into the layout of ``view``."""
    _check_view(view)
    lead = volume.ndim - 3
    perm = tuple(range(lead)) + tuple(lead + a for a in _PERMUTATIONS[view])
    return np.transpose(volume, perm)


def transpose_from_view(volume: np.ndarray, view: str) -> np.ndarray:
    _check_view(view)
    lead = volume.ndim - 3
    inverse = np.argsort(_PERMUTATIONS[view])
    perm = tuple(range(lead)) + tuple(lead + int(a) for a in inverse)
    return np.transpose(volume, perm)


def patchify(volume: np.ndarray, cfg: PatchConfig) -> np.ndarray:
    """(…, d, h, w) -> (…, N_p, P_t * P_h * P_w), blocks in row-major (t, i, j) order."""
    *lead, d, h, w = volume.shape
    n_t, n_h, n_w = cfg.grid((d, h, w))
    x = volume.reshape(*lead, n_t, cfg.patch_t, n_h, cfg.patch_h, n_w, cfg.patch_w)
    k = len(lead)
    x = x.transpose(*range(k), k, k + 2, k + 4, k + 1, k + 3, k + 5)
    return x.reshape(*lead, n_t * n_h * n_w, cfg.patch_volume)


def unpatchify(patches: np.ndarray, cfg: PatchConfig, dims: tuple[int, int, int]) -> np.ndarray:
    n_t, n_h, n_w = cfg.grid(dims)
    *lead, n_p, vol = patches.shape
    if n_p != n_t * n_h * n_w or vol != cfg.patch_volume:
        raise ConfigError(f"patch array {patches.shape} does not fit dims {dims} with {cfg}")
    k = len(lead)
    x = patches.reshape(*lead, n_t, n_h, n_w, cfg.patch_t, cfg.patch_h, cfg.patch_w)
    x = x.transpose(*range(k), k, k + 3, k + 1, k + 4, k + 2, k + 5)
    return x.reshape(*lead, *dims)


class CTViT(Module):
    """Encoder half of a CT-ViT: patch embedding, spatial transformer per slot, causal transformer over slots."""

    def __init__(self, dims: tuple[int, int, int], cfg: PatchConfig, rng: np.random.Generator,
                 spatial_layers: int = 2, causal_layers: int = 2, heads: int = 1):
        self.cfg = cfg
        self.dims = tuple(dims)
        self.grid_shape = cfg.grid(self.dims)
        n_t, n_h, n_w = self.grid_shape
        d = cfg.dim
        self.patch_embed = Linear(cfg.patch_volume, d, rng)
        self.pos_spatial = normal(rng, (n_h * n_w, d), 0.02)
        self.pos_temporal = normal(rng, (n_t, d), 0.02)
        self.spatial = [EncoderLayer(d, rng, heads=heads) for _ in range(spatial_layers)]
        self.causal = [EncoderLayer(d, rng, heads=heads) for _ in range(causal_layers)]
        self.norm = LayerNorm(d)

    def forward(self, volume: np.ndarray) -> Tensor:
        volume = np.asarray(volume)
        single = volume.ndim == 3
        if single:
            volume = volume[None]
        if tuple(volume.shape[1:]) != self.dims:
            raise ConfigError(f"extractor built for dims {self.dims}, got volume {volume.shape[1:]}")
        b = volume.shape[0]
        n_t, n_h, n_w = self.grid_shape
        s, d = n_h * n_w, self.cfg.dim
        patches = Tensor(patchify(volume, self.cfg))
        x = self.patch_embed(patches).reshape(b, n_t, s, d)
        pos_t = T.expand(self.pos_temporal.reshape(n_t, 1, d), (n_t, s, d))
        x = x + self.pos_spatial + pos_t

        x = x.reshape(b * n_t, s, d)
        for layer in self.spatial:
            x = layer(x)
        x = x.reshape(b, n_t, s, d).transpose(0, 2, 1, 3).reshape(b * s, n_t, d)
        mask = causal_mask(n_t, x.dtype)
        for layer in self.causal:
            x = layer(x, mask=mask)
        x = x.reshape(b, s, n_t, d).transpose(0, 2, 1, 3).reshape(b, n_t * s, d)
        x = self.norm(x)
        return x[0] if single else x


def extract_tokens(volume_v: np.ndarray, params: CTViT, view: str) -> ViewTokenSet:
    """Run an already-transposed view volume through its own extractor."""
    _check_view(view)
    return ViewTokenSet(params(volume_v), view, params.grid_shape)


class VisualExtractor(Module):
    """Three independent CT-ViTs, one per anatomical view."""

    def __init__(self, dims: tuple[int, int, int], cfg: PatchConfig, rng: np.random.Generator,
                 views=VIEWS, spatial_layers: int = 2, causal_layers: int = 2):
        self.views = {}
        for view in views:
            view_dims = transpose_to_view(np.empty(dims, dtype=np.uint8), view).shape
            self.views[view] = CTViT(view_dims, cfg, rng, spatial_layers, causal_layers)

    def forward(self, volume: np.ndarray) -> dict[str, ViewTokenSet]:
        return {view: extract_tokens(transpose_to_view(volume, view), vit, view)
                for view, vit in self.views.items()}
