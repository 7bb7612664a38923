"""End-to-end report model: extractor -> (MVPA) -> (CMKE) -> cross-modal-memory generator."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .cmke import KnowledgeEnhancer, ReportBank, VolumeQueryEmbedder, retrieve_topk
from .extractor import VIEWS, PatchConfig, VisualExtractor
from .generator import DecodeConfig, ReportGenerator
from .kan import SplineGrid
from .mvpa import MVPA
from .nn import Module
from .tensor import ContractError, Tensor, no_grad


@dataclass(frozen=True)
class AblationConfig:
    enable_mvpa: bool = True
    enable_cmke: bool = True
    fusion_kind: str = "kan"

    def __post_init__(self):
        if self.fusion_kind not in ("kan", "mlp"):
            raise ValueError(f"fusion_kind must be 'kan' or 'mlp', got '{self.fusion_kind}'")


# the five rows of the ablation table
ABLATIONS = {
    "BASE": AblationConfig(False, False, "kan"),
    "BASE+MVPA": AblationConfig(True, False, "kan"),
    "BASE+CMKE": AblationConfig(False, True, "kan"),
    "Ours-MLP": AblationConfig(True, True, "mlp"),
    "Ours": AblationConfig(True, True, "kan"),
}


@dataclass(frozen=True)
class ModelConfig:
    volume_dims: tuple = (32, 32, 32)
    patch: int = 8
    d_model: int = 64
    spatial_layers: int = 2
    causal_layers: int = 2
    generator_layers: int = 3
    heads: int = 1
    memory_slots: int = 32
    memory_mode: str = "normalized"
    grid_intervals: int = 8
    spline_degree: int = 3
    knowledge_dim: int = 256
    top_k: int = 16
    max_positions: int = 256

    @classmethod
    def from_dict(cls, payload: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in payload.items() if k in names}
        if "volume_dims" in kwargs:
            kwargs["volume_dims"] = tuple(kwargs["volume_dims"])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["volume_dims"] = list(self.volume_dims)
        return out

    @property
    def patch_config(self) -> PatchConfig:
        return PatchConfig(self.patch, self.patch, self.patch, self.d_model)

    @property
    def n_tokens(self) -> int:
        return self.patch_config.token_count(tuple(self.volume_dims))


@dataclass
class Retriever:
    """Frozen volume-to-report retrieval used to feed the knowledge enhancer."""

    bank: ReportBank
    embedder: object
    k: int
    _cache: dict = field(default_factory=dict, repr=False)

    def __call__(self, volume: np.ndarray) -> np.ndarray:
        key = hash(volume.tobytes())
        if key not in self._cache:
            self._cache[key] = retrieve_topk(self.embedder(volume), self.bank, self.k).embeddings
        return self._cache[key]

    def batch(self, volumes: np.ndarray) -> np.ndarray:
        return np.stack([self(v) for v in volumes])


def default_retriever(bank: ReportBank, cfg: ModelConfig, seed: int = 0) -> Retriever:
    embedder = VolumeQueryEmbedder(cfg.patch, cfg.n_tokens, bank.dim, seed)
    return Retriever(bank, embedder, cfg.top_k)


class ReportModel(Module):
    def __init__(self, vocab_size: int, cfg: ModelConfig = ModelConfig(), ablation: AblationConfig = AblationConfig(),
                 seed: int = 0, retriever: Retriever | None = None):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.ablation = ablation
        grid = SplineGrid(-1.0, 1.0, cfg.grid_intervals, cfg.spline_degree)
        views = VIEWS if ablation.enable_mvpa else ("axial",)
        self.extractor = VisualExtractor(tuple(cfg.volume_dims), cfg.patch_config, rng, views,
                                         cfg.spatial_layers, cfg.causal_layers)
        self.mvpa = MVPA(cfg.n_tokens, cfg.d_model, rng, fusion=ablation.fusion_kind, grid=grid) \
            if ablation.enable_mvpa else None
        self.cmke = KnowledgeEnhancer(cfg.d_model, cfg.knowledge_dim, rng, fusion=ablation.fusion_kind, grid=grid) \
            if ablation.enable_cmke else None
        self.generator = ReportGenerator(vocab_size, cfg.d_model, rng, cfg.memory_slots, cfg.generator_layers,
                                         cfg.heads, cfg.memory_mode, cfg.max_positions)
        self._retriever = retriever

    @property
    def retriever(self) -> Retriever | None:
        return self._retriever

    @retriever.setter
    def retriever(self, value: Retriever | None) -> None:
        self._retriever = value

    def knowledge(self, volumes: np.ndarray) -> np.ndarray | None:
        if self.cmke is None:
            return None
        if self._retriever is None:
            raise ContractError("knowledge enhancement is enabled but no report bank retriever is attached")
        return self._retriever.batch(volumes)

    def source(self, volumes: np.ndarray, knowledge: np.ndarray | None = None) -> Tensor:
        """Fused source sequence F_S for a batch of (d, h, w) volumes."""
        volumes = np.asarray(volumes)
        if volumes.ndim == 3:
            volumes = volumes[None]
        tokens = {v: ts.tokens for v, ts in self.extractor(volumes).items()}
        parts = [self.mvpa(tokens) if self.mvpa is not None else tokens["axial"]]
        if self.cmke is not None:
            if knowledge is None:
                knowledge = self.knowledge(volumes)
            parts.append(self.cmke(tokens["axial"], Tensor(knowledge)))
        return parts[0] if len(parts) == 1 else T.concat(parts, axis=-2)

    def forward(self, volumes: np.ndarray, input_ids: np.ndarray, knowledge: np.ndarray | None = None) -> Tensor:
        encoded = self.generator.encode(self.source(volumes, knowledge))
        return self.generator.decode(encoded, input_ids)

    def encode(self, volume: np.ndarray, knowledge: np.ndarray | None = None) -> Tensor:
        with no_grad():
            return self.generator.encode(self.source(volume, knowledge))

    def generate(self, volume: np.ndarray, decode: DecodeConfig = DecodeConfig(),
                 knowledge: np.ndarray | None = None) -> list[int]:
        return self.generator.generate(self.encode(volume, knowledge), decode)

    def param_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        """Per-view extractor groups plus everything else."""
        groups: dict[str, list] = {f"extractor.{v}": [] for v in self.extractor.views}
        groups["other"] = []
        for name, p in self.named_parameters():
            for view in self.extractor.views:
                if name.startswith(f"extractor.views.{view}."):
                    groups[f"extractor.{view}"].append((name, p))
                    break
            else:
                groups["other"].append((name, p))
        return groups
