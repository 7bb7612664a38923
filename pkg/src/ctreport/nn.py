"""Parameter containers, attention variants and pre-norm transformer layers."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ContractError, DimensionError, Tensor


def parameter(values: np.ndarray) -> Tensor:
    return Tensor(values, requires_grad=True)


def normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return parameter(rng.normal(0.0, std, size=shape))


def zeros(shape) -> Tensor:
    return parameter(np.zeros(shape))


def ones(shape) -> Tensor:
    return parameter(np.ones(shape))


class Module:
    """Base class; parameters are discovered by walking instance attributes."""

    # Modules that set a namespace publish their parameters as
    # "<namespace>.<path>.<field>" instead of "<path>.<field>".
    namespace: str | None = None

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield f"{name}.{i}", item
            elif isinstance(value, dict):
                for key, item in value.items():
                    yield f"{name}.{key}", item
            else:
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                if self.namespace and prefix:
                    yield f"{self.namespace}.{path}", value
                else:
                    yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            values = np.asarray(state[name])
            if values.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {values.shape} != parameter shape {p.shape}")
            p.data = values.astype(p.dtype, copy=True)

    def astype(self, dtype) -> Module:
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, std: float | None = None):
        self.weight = normal(rng, (n_in, n_out), std if std is not None else 1.0 / math.sqrt(n_in))
        self.bias = zeros((n_out,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError(f"Linear expects last dim {self.weight.shape[0]}, got {x.shape}")
        out = x @ self.weight
        return out if self.bias is None else out + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = ones((dim,))
        self.bias = zeros((dim,))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = normal(rng, (n, dim), std)

    def forward(self, ids) -> Tensor:
        return T.embedding(self.weight, ids)


# -- attention -----------------------------------------------------------------------

def causal_mask(n: int, dtype=None) -> np.ndarray:
    """Additive mask: 0 on and below the diagonal, a large negative number above."""
    mask = np.triu(np.ones((n, n), dtype=bool), k=1)
    return np.where(mask, -1e9, 0.0).astype(dtype or T.get_default_dtype())


def attention_weights(q: Tensor, k: Tensor, bias: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
    d_k = q.shape[-1]
    if d_k == 0:
        raise DimensionError("attention needs d_k > 0")
    if k.shape[-1] != d_k:
        raise DimensionError(f"attention: query width {q.shape} and key width {k.shape} differ")
    scores = (q @ k.T) * (1.0 / math.sqrt(d_k))
    if bias is not None:
        scores = scores + bias
    if mask is not None:
        scores = scores + Tensor(mask, dtype=scores.dtype)
    return T.softmax(scores)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None, return_weights: bool = False):
    """Softmax(QK^T / sqrt(d_k)) V."""
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    w = attention_weights(q, k, mask=mask)
    out = w @ v
    return (out, w) if return_weights else out


def view_aware_attention(q: Tensor, k: Tensor, v: Tensor, view_embedding: Tensor, view: str = "?",
                         return_weights: bool = False):
    """Softmax(QK^T / sqrt(d_k) + Q E_v^T) V.

    The view term is deliberately left unscaled.
    """
    if view_embedding.shape != k.shape[-2:]:
        raise DimensionError(
            f"view embedding for view '{view}' has shape {view_embedding.shape}, expected {k.shape[-2:]}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    bias = q @ view_embedding.T
    w = attention_weights(q, k, bias=bias)
    out = w @ v
    return (out, w) if return_weights else out


class ProjectionTriple(Module):
    """W_q, W_k (D x d_k) and W_v (D x d_v)."""

    def __init__(self, d_model: int, d_k: int, d_v: int, rng: np.random.Generator, d_kv_in: int | None = None):
        d_kv_in = d_kv_in or d_model
        self.w_q = normal(rng, (d_model, d_k), 1.0 / math.sqrt(d_model))
        self.w_k = normal(rng, (d_kv_in, d_k), 1.0 / math.sqrt(d_kv_in))
        self.w_v = normal(rng, (d_kv_in, d_v), 1.0 / math.sqrt(d_kv_in))

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1]

    def project(self, x: Tensor, y: Tensor | None = None):
        y = x if y is None else y
        return x @ self.w_q, y @ self.w_k, y @ self.w_v


def cross_attention(queries: Tensor, keys_values: Tensor, proj: ProjectionTriple, return_weights: bool = False):
    """Softmax((X W_q)(Y W_k)^T / sqrt(d_k)) (Y W_v)."""
    if keys_values.shape[-2] == 0:
        raise ContractError("cross_attention needs at least one key/value row")
    q, k, v = proj.project(queries, keys_values)
    return attention(q, k, v, return_weights=return_weights)


class MultiHeadAttention(Module):
    """Projected attention with an output projection; one head unless configured otherwise."""

    def __init__(self, d_model: int, rng: np.random.Generator, heads: int = 1):
        if d_model % heads:
            raise DimensionError(f"d_model {d_model} not divisible by {heads} heads")
        self.heads = heads
        self.w_q = normal(rng, (d_model, d_model), 1.0 / math.sqrt(d_model))
        self.w_k = normal(rng, (d_model, d_model), 1.0 / math.sqrt(d_model))
        self.w_v = normal(rng, (d_model, d_model), 1.0 / math.sqrt(d_model))
        self.w_o = normal(rng, (d_model, d_model), 1.0 / math.sqrt(d_model))
        self.b_o = zeros((d_model,))

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, d = x.shape
        x = x.reshape(*lead, n, self.heads, d // self.heads)
        axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
        return x.transpose(*axes)

    def _merge(self, x: Tensor) -> Tensor:
        *lead, h, n, dh = x.shape
        axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
        return x.transpose(*axes).reshape(*lead, n, h * dh)

    def forward(self, x: Tensor, memory: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
        memory = x if memory is None else memory
        q, k, v = x @ self.w_q, memory @ self.w_k, memory @ self.w_v
        if self.heads == 1:
            out = attention(q, k, v, mask=mask)
        else:
            out = self._merge(attention(self._split(q), self._split(k), self._split(v), mask=mask))
        return out @ self.w_o + self.b_o


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator):
        if d_ff < d_model:
            raise DimensionError(f"feed-forward width {d_ff} must be >= model width {d_model}")
        self.fc1 = Linear(d_model, d_ff, rng)
        self.fc2 = Linear(d_ff, d_model, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class EncoderLayer(Module):
    """Pre-norm self-attention + feed-forward, both residual."""

    def __init__(self, d_model: int, rng: np.random.Generator, ff_mult: int = 2, heads: int = 1):
        self.norm1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, rng, heads)
        self.norm2 = LayerNorm(d_model)
        self.ff = FeedForward(d_model, ff_mult * d_model, rng)

    def forward(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        if x.shape[-1] != self.norm1.gain.shape[0]:
            raise DimensionError(f"encoder layer width {self.norm1.gain.shape[0]} vs input {x.shape}")
        x = x + self.attn(self.norm1(x), mask=mask)
        return x + self.ff(self.norm2(x))


class DecoderLayer(Module):
    """Pre-norm causal self-attention, cross-attention to memory, feed-forward."""

    def __init__(self, d_model: int, rng: np.random.Generator, ff_mult: int = 2, heads: int = 1):
        self.norm1 = LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, rng, heads)
        self.norm2 = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, rng, heads)
        self.norm3 = LayerNorm(d_model)
        self.ff = FeedForward(d_model, ff_mult * d_model, rng)

    def forward(self, x: Tensor, memory: Tensor, causal: bool = True) -> Tensor:
        if x.shape[-1] != memory.shape[-1] or x.shape[-1] != self.norm1.gain.shape[0]:
            raise DimensionError(f"decoder layer: input {x.shape} / memory {memory.shape} widths differ")
        mask = causal_mask(x.shape[-2], x.dtype) if causal else None
        x = x + self.self_attn(self.norm1(x), mask=mask)
        x = x + self.cross_attn(self.norm2(x), memory=memory)
        return x + self.ff(self.norm3(x))


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    freq = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: d // 2])
    return table
