"""Cross-modal knowledge enhancer: report bank, top-k cosine retrieval and knowledge fusion."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .kan import SplineGrid, fusion_layer
from .nn import LayerNorm, Linear, Module, ProjectionTriple, cross_attention
from .tensor import ContractError, DimensionError, Tensor
from .text import tokenize

BANK_MAGIC = "MVKT-BANK v1"


class Embedder(Protocol):
    tag: str
    dim: int

    def __call__(self, item) -> np.ndarray: ...


def l2_normalize(x: np.ndarray, axis: int = -1) -> np.ndarray:
    norm = np.linalg.norm(x, axis=axis, keepdims=True)
    return np.divide(x, norm, out=np.zeros_like(x), where=norm > 0)


class HashedBagOfWords:
    """Signed feature hashing of report tokens, L2-normalised."""

    def __init__(self, dim: int = 256):
        self.dim = dim
        self.tag = f"hashbow-{dim}"

    def _slot(self, token: str) -> tuple[int, float]:
        h = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")
        return h % self.dim, 1.0 if (h >> 40) & 1 else -1.0

    def __call__(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            raise ContractError("cannot embed an empty report")
        vec = np.zeros(self.dim)
        for tok in tokens:
            slot, sign = self._slot(tok)
            vec[slot] += sign
        return l2_normalize(vec)


def embed_report(text: str, dim: int = 256) -> np.ndarray:
    return HashedBagOfWords(dim)(text)


class PooledProjection:
    """Mean-pool a token set, then apply a fixed seeded Gaussian projection."""

    def __init__(self, d_in: int, dim: int = 256, seed: int = 0):
        self.dim = dim
        self.tag = f"poolproj-{d_in}x{dim}-s{seed}"
        self.matrix = np.random.default_rng(seed).normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, dim))

    def __call__(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens.data if isinstance(tokens, Tensor) else tokens, dtype=np.float64)
        if tokens.ndim != 2 or tokens.shape[0] == 0:
            raise ContractError(f"query embedding needs a non-empty (N, D) token set, got {tokens.shape}")
        return l2_normalize(tokens.mean(axis=0) @ self.matrix)


class VolumeQueryEmbedder:
    """Frozen volume embedder: per-patch mean intensities (centred) through a seeded projection.

    Pooling happens within each patch so that lesion location survives.
    """

    def __init__(self, patch: int = 8, n_patches: int = 64, dim: int = 256, seed: int = 0):
        self.patch = patch
        self.dim = dim
        self.tag = f"volpool-p{patch}-{dim}-s{seed}"
        self.matrix = np.random.default_rng(seed).normal(0.0, 1.0 / np.sqrt(n_patches), size=(n_patches, dim))

    def __call__(self, volume: np.ndarray) -> np.ndarray:
        volume = np.asarray(volume, dtype=np.float64)
        if volume.ndim != 3 or volume.size == 0:
            raise ContractError(f"query embedding needs a (d, h, w) volume, got {volume.shape}")
        p = self.patch
        d, h, w = volume.shape
        if d % p or h % p or w % p:
            raise ContractError(f"volume {volume.shape} not divisible by patch {p}")
        pooled = volume.reshape(d // p, p, h // p, p, w // p, p).mean(axis=(1, 3, 5)).reshape(-1)
        if pooled.size != self.matrix.shape[0]:
            raise DimensionError(f"embedder built for {self.matrix.shape[0]} patches, volume has {pooled.size}")
        return l2_normalize((pooled - pooled.mean()) @ self.matrix)


def embed_query(item, embedder) -> np.ndarray:
    """Axial query vector from axial tokens or the axial volume, via ``embedder``."""
    return embedder(item)


@dataclass
class ReportBank:
    ids: list[str]
    reports: list[str]
    embeddings: np.ndarray  # (N_r, D_e), float32
    embedder_tag: str
    normalized: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        if self.embeddings.ndim != 2 or len(self.embeddings) != len(self.reports) or len(self.ids) != len(self.reports):
            raise DimensionError(f"bank has {len(self.reports)} reports, {len(self.ids)} ids and "
                                 f"embeddings {self.embeddings.shape}")
        self.normalized = l2_normalize(self.embeddings.astype(np.float64))

    def __len__(self) -> int:
        return len(self.reports)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @classmethod
    def build(cls, ids: Sequence[str], reports: Sequence[str], embedder) -> ReportBank:
        rows = np.stack([embedder(r) for r in reports]) if reports else np.zeros((0, embedder.dim))
        return cls(list(ids), list(reports), rows, embedder.tag)

    def save(self, path) -> None:
        header = f"{BANK_MAGIC} D_e={self.dim} N_r={len(self)} embedder={self.embedder_tag}\n"
        tmp = f"{path}.tmp"
        with open(tmp, "wb") as fh:
            fh.write(header.encode("utf-8"))
            fh.write(self.embeddings.astype("<f4").tobytes())
            for rid, report in zip(self.ids, self.reports):
                fh.write((json.dumps({"id": rid, "report": report}, ensure_ascii=False) + "\n").encode("utf-8"))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> ReportBank:
        with open(path, "rb") as fh:
            raw = fh.read()
        end = raw.find(b"\n")
        header = raw[:end].decode("utf-8") if end >= 0 else ""
        if not header.startswith(BANK_MAGIC + " "):
            raise ValueError(f"{path}: not a report bank file (bad magic)")
        fields = dict(part.split("=", 1) for part in header[len(BANK_MAGIC) + 1:].split(" "))
        dim, count = int(fields["D_e"]), int(fields["N_r"])
        start = end + 1
        nbytes = dim * count * 4
        rows = np.frombuffer(raw[start:start + nbytes], dtype="<f4").reshape(count, dim)
        lines = raw[start + nbytes:].decode("utf-8").splitlines()
        if len(lines) != count:
            raise ValueError(f"{path}: expected {count} report lines, found {len(lines)}")
        records = [json.loads(line) for line in lines]
        return cls([r["id"] for r in records], [r["report"] for r in records], rows.copy(), fields["embedder"])


@dataclass
class RetrievalResult:
    indices: np.ndarray
    similarities: np.ndarray
    embeddings: np.ndarray  # Z_topk, (k, D_e)


def cosine_similarities(v: np.ndarray, bank: ReportBank) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (bank.dim,):
        raise DimensionError(f"query has shape {v.shape}, bank width is {bank.dim}")
    return bank.normalized @ l2_normalize(v)


def retrieve_topk(v: np.ndarray, bank: ReportBank, k: int) -> RetrievalResult:
    """Top-k bank rows by cosine similarity; ties go to the lower index."""
    if not 1 <= k <= len(bank):
        raise ContractError(f"top-k must satisfy 1 <= k <= N_r = {len(bank)}, got k={k}")
    sims = cosine_similarities(v, bank)
    order = np.argsort(-sims, kind="stable")[:k]
    return RetrievalResult(order, sims[order], bank.embeddings[order])


class KnowledgeEnhancer(Module):
    """AN = Norm(CrossAttn(Z^a, Z_topk) + Z^a); F_ke = Norm(Fusion(AN) + AN)."""

    def __init__(self, d_model: int, d_knowledge: int, rng: np.random.Generator, d_k: int | None = None,
                 fusion: str = "kan", grid: SplineGrid | None = None):
        d_k = d_k or d_model
        self.knowledge_proj = Linear(d_knowledge, d_model, rng, bias=False) if d_knowledge != d_model else None
        self.proj = ProjectionTriple(d_model, d_k, d_model, rng)
        self.norm1 = LayerNorm(d_model)
        self.fusion = fusion_layer(fusion, d_model, d_model, rng, grid)
        self.norm2 = LayerNorm(d_model)

    def forward(self, z_axial: Tensor, z_topk, return_weights: bool = False):
        z_topk = z_topk if isinstance(z_topk, Tensor) else Tensor(z_topk)
        if z_topk.shape[-2] == 0:
            raise ContractError("knowledge enhancement needs at least one retrieved embedding")
        knowledge = self.knowledge_proj(z_topk) if self.knowledge_proj is not None else z_topk
        if knowledge.shape[-1] != z_axial.shape[-1]:
            raise DimensionError(f"knowledge width {knowledge.shape[-1]} != token width {z_axial.shape[-1]}")
        attended, weights = cross_attention(z_axial, knowledge, self.proj, return_weights=True)
        an = self.norm1(attended + z_axial)
        out = self.norm2(self.fusion(an) + an)
        return (out, weights) if return_weights else out


def enhance(z_axial: Tensor, z_topk, params: KnowledgeEnhancer) -> Tensor:
    return params(z_axial, z_topk)
