"""Objective, optimiser, training loop, checkpoints and the ablation / top-k harnesses."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .cmke import ReportBank
from .generator import DecodeConfig
from .model import ABLATIONS, AblationConfig, ModelConfig, ReportModel, default_retriever
from .tensor import ContractError, NonFiniteError, Tensor, no_grad
from .text import METRIC_NAMES, Vocabulary, build_vocab, evaluate

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"MVKT-CKPT v1\n"


def nll_loss(logits: Tensor, targets, pad_id: int = 0) -> Tensor:
    """Mean -log p(target) over non-pad positions."""
    return T.cross_entropy(logits, targets, ignore_index=pad_id)


# -- optimisation ------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr_extractor: float = 5e-5
    lr_other: float = 1e-4
    decay: float = 0.8
    batch_size: int = 2
    epochs: int = 30
    seed: int = 0
    dtype: str = "float32"
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    check_finite: bool = False

    def __post_init__(self):
        if self.lr_extractor <= 0 or self.lr_other <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError(f"decay must lie in (0, 1], got {self.decay}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch size must be >= 1 and epochs >= 0")

    @classmethod
    def from_dict(cls, payload: dict) -> TrainConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in payload.items() if k in names})

    def base_rates(self, groups: Sequence[str]) -> dict[str, float]:
        return {g: self.lr_extractor if g.startswith("extractor.") else self.lr_other for g in groups}


# desk-scale overrides for the overfit suite
MEMORIZATION = dict(lr_extractor=1e-3, lr_other=1e-3, decay=0.99, batch_size=2, epochs=300)


def learning_rate(base: float, decay: float, epoch: int) -> float:
    return base * decay ** epoch


class Adam:
    """Adam with bias correction over named parameter groups."""

    def __init__(self, groups: dict[str, list[tuple[str, Tensor]]], rates: dict[str, float],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, check_finite: bool = False):
        self.groups = groups
        self.rates = dict(rates)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.check_finite = check_finite
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        for members in groups.values():
            for name, p in members:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)

    def named_params(self):
        for group, members in self.groups.items():
            for name, p in members:
                yield group, name, p

    def zero_grad(self) -> None:
        for _, _, p in self.named_params():
            p.grad = None

    def clip(self, max_norm: float) -> float:
        total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                              for _, _, p in self.named_params() if p.grad is not None))
        if max_norm and total > max_norm:
            scale = max_norm / (total + 1e-12)
            for _, _, p in self.named_params():
                if p.grad is not None:
                    p.grad = p.grad * scale
        return total

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for group, name, p in self.named_params():
            g = p.grad
            if g is None:
                continue
            if self.check_finite and not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {name}")
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (self.rates[group] / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)


def adam_step(params: Sequence[Tensor], state: Adam, rate: float | None = None) -> None:
    """Single Adam update of ``state``'s parameters, optionally overriding every group's rate."""
    if rate is not None:
        state.rates = {g: rate for g in state.rates}
    state.step()


# -- data preparation ---------------------------------------------------------------------

@dataclass
class Sample:
    id: str
    volume: np.ndarray
    report: str


def encode_reports(samples: Sequence[Sample], vocab: Vocabulary) -> list[list[int]]:
    return [vocab.encode(s.report) for s in samples]


def make_batch(ids: Sequence[Sequence[int]], vocab: Vocabulary) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forcing pairs: inputs [start, y...] and targets [y..., end], right-padded."""
    width = max(len(s) for s in ids) + 1
    inputs = np.full((len(ids), width), vocab.pad_id, dtype=np.int64)
    targets = np.full((len(ids), width), vocab.pad_id, dtype=np.int64)
    for row, seq in enumerate(ids):
        inputs[row, : len(seq) + 1] = [vocab.bos_id] + list(seq)
        targets[row, : len(seq) + 1] = list(seq) + [vocab.eos_id]
    return inputs, targets


# -- checkpoints ------------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model_config: dict
    ablation: dict
    train_config: dict
    vocab: dict
    tensors: dict[str, np.ndarray]
    epoch: int = 0
    optimizer_step: int = 0
    rng_state: dict | None = None
    log: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Magic line, uint64 manifest length, JSON manifest, raw little-endian float32 payloads."""
    entries = []
    payload = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    manifest = {
        "format": 1,
        "model_config": ckpt.model_config,
        "ablation": ckpt.ablation,
        "train_config": ckpt.train_config,
        "vocab": ckpt.vocab,
        "epoch": ckpt.epoch,
        "optimizer_step": ckpt.optimizer_step,
        "rng_state": ckpt.rng_state,
        "log": ckpt.log,
        "extra": ckpt.extra,
        "tensors": entries,
    }
    blob = json.dumps(manifest).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in payload:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = len(CKPT_MAGIC)
    (length,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    manifest = json.loads(raw[pos:pos + length].decode("utf-8"))
    base = pos + length
    tensors = {}
    for entry in manifest["tensors"]:
        start = base + entry["offset"]
        arr = np.frombuffer(raw[start:start + entry["nbytes"]], dtype="<f4")
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(manifest["model_config"], manifest["ablation"], manifest["train_config"], manifest["vocab"],
                      tensors, manifest["epoch"], manifest["optimizer_step"], manifest["rng_state"],
                      manifest.get("log", []), manifest.get("extra", {}))


# -- training -------------------------------------------------------------------------------------

@dataclass
class TrainLog:
    epoch_losses: list[float] = field(default_factory=list)
    learning_rates: list[dict] = field(default_factory=list)
    final_nll: float | None = None


class Trainer:
    """Owns model, optimiser and data order so that a run can be checkpointed and resumed exactly."""

    def __init__(self, model: ReportModel, vocab: Vocabulary, samples: Sequence[Sample], cfg: TrainConfig):
        if not samples:
            raise ContractError("cannot train on an empty dataset")
        self.model = model
        self.vocab = vocab
        self.samples = list(samples)
        self.cfg = cfg
        self.targets = encode_reports(self.samples, vocab)
        self.volumes = np.stack([s.volume for s in self.samples]).astype(np.float32)
        self.knowledge = model.knowledge(self.volumes) if model.cmke is not None else None
        groups = model.param_groups()
        self.optimizer = Adam(groups, cfg.base_rates(groups), cfg.beta1, cfg.beta2, cfg.eps, cfg.check_finite)
        self.rng = np.random.default_rng(cfg.seed)
        self.epoch = 0
        self.log = TrainLog()

    def set_epoch_rates(self) -> dict[str, float]:
        base = self.cfg.base_rates(self.optimizer.groups)
        rates = {g: learning_rate(r, self.cfg.decay, self.epoch) for g, r in base.items()}
        self.optimizer.rates = rates
        return rates

    def batch_loss(self, index: np.ndarray) -> Tensor:
        inputs, targets = make_batch([self.targets[i] for i in index], self.vocab)
        knowledge = None if self.knowledge is None else self.knowledge[index]
        logits = self.model(self.volumes[index], inputs, knowledge)
        return nll_loss(logits, targets, self.vocab.pad_id)

    def run_epoch(self) -> float:
        rates = self.set_epoch_rates()
        order = self.rng.permutation(len(self.samples))
        losses = []
        for start in range(0, len(order), self.cfg.batch_size):
            index = order[start:start + self.cfg.batch_size]
            self.optimizer.zero_grad()
            loss = self.batch_loss(index)
            loss.backward()
            self.optimizer.clip(self.cfg.clip_norm)
            self.optimizer.step()
            losses.append(float(loss.data))
        mean_loss = float(np.mean(losses))
        self.log.epoch_losses.append(mean_loss)
        self.log.learning_rates.append(rates)
        self.epoch += 1
        logger.info("epoch %d loss %.5f", self.epoch, mean_loss)
        return mean_loss

    def mean_token_nll(self) -> float:
        """Token-averaged NLL over the whole training set, no parameter update."""
        total = count = 0.0
        with no_grad():
            for start in range(0, len(self.samples), self.cfg.batch_size):
                index = np.arange(start, min(start + self.cfg.batch_size, len(self.samples)))
                _, targets = make_batch([self.targets[i] for i in index], self.vocab)
                n = int((targets != self.vocab.pad_id).sum())
                total += float(self.batch_loss(index).data) * n
                count += n
        return total / count

    def fit(self, epochs: int | None = None, target_nll: float | None = None, checkpoint_path=None) -> TrainLog:
        epochs = self.cfg.epochs if epochs is None else epochs
        with T.default_dtype(np.dtype(self.cfg.dtype).type), T.check_finite(self.cfg.check_finite):
            while self.epoch < epochs:
                self.run_epoch()
                if target_nll is not None and self.log.epoch_losses[-1] < target_nll:
                    if self.mean_token_nll() < target_nll:
                        break
            self.log.final_nll = self.mean_token_nll()
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, self.checkpoint())
        return self.log

    # -- persistence ----------------------------------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        tensors = dict(self.model.state_dict())
        for name in self.optimizer.m:
            tensors[f"adam.m.{name}"] = self.optimizer.m[name]
            tensors[f"adam.v.{name}"] = self.optimizer.v[name]
        return Checkpoint(self.model.cfg.to_dict(), asdict(self.model.ablation), asdict(self.cfg),
                          self.vocab.to_dict(), tensors, self.epoch, self.optimizer.step_count,
                          self.rng.bit_generator.state, self.log.epoch_losses,
                          {"sample_ids": [s.id for s in self.samples]})

    def restore(self, ckpt: Checkpoint) -> None:
        params = {k: v for k, v in ckpt.tensors.items() if not k.startswith("adam.")}
        self.model.load_state_dict(params)
        for name in self.optimizer.m:
            self.optimizer.m[name] = ckpt.tensors[f"adam.m.{name}"].astype(self.optimizer.m[name].dtype)
            self.optimizer.v[name] = ckpt.tensors[f"adam.v.{name}"].astype(self.optimizer.v[name].dtype)
        self.optimizer.step_count = ckpt.optimizer_step
        self.epoch = ckpt.epoch
        if ckpt.rng_state is not None:
            self.rng.bit_generator.state = ckpt.rng_state
        self.log.epoch_losses = list(ckpt.log)


def model_from_checkpoint(ckpt: Checkpoint, bank: ReportBank | None = None) -> tuple[ReportModel, Vocabulary]:
    vocab = Vocabulary.from_dict(ckpt.vocab)
    cfg = ModelConfig.from_dict(ckpt.model_config)
    ablation = AblationConfig(**ckpt.ablation)
    dtype = np.dtype(ckpt.train_config.get("dtype", "float32")).type
    with T.default_dtype(dtype):
        model = ReportModel(len(vocab), cfg, ablation, seed=ckpt.train_config.get("seed", 0))
    model.load_state_dict({k: v for k, v in ckpt.tensors.items() if not k.startswith("adam.")})
    if bank is not None and ablation.enable_cmke:
        model.retriever = default_retriever(bank, cfg, ckpt.train_config.get("seed", 0))
    return model, vocab


def build_model(vocab: Vocabulary, model_cfg: ModelConfig, ablation: AblationConfig, train_cfg: TrainConfig,
                bank: ReportBank | None = None) -> ReportModel:
    with T.default_dtype(np.dtype(train_cfg.dtype).type):
        model = ReportModel(len(vocab), model_cfg, ablation, seed=train_cfg.seed)
    if ablation.enable_cmke:
        if bank is None:
            raise ContractError(f"configuration {ablation} needs a report bank")
        model.retriever = default_retriever(bank, model_cfg, train_cfg.seed)
    return model


def train(model: ReportModel, vocab: Vocabulary, samples: Sequence[Sample], cfg: TrainConfig,
          checkpoint_path=None, target_nll: float | None = None) -> TrainLog:
    return Trainer(model, vocab, samples, cfg).fit(target_nll=target_nll, checkpoint_path=checkpoint_path)


def generate_reports(model: ReportModel, vocab: Vocabulary, samples: Sequence[Sample],
                     decode: DecodeConfig = DecodeConfig()) -> list[list[int]]:
    return [model.generate(s.volume, decode) for s in samples]


def exact_matches(model: ReportModel, vocab: Vocabulary, samples: Sequence[Sample],
                  decode: DecodeConfig = DecodeConfig(strategy="greedy")) -> int:
    hits = 0
    for sample, ids in zip(samples, generate_reports(model, vocab, samples, decode)):
        hits += ids == vocab.encode(sample.report) + [vocab.eos_id]
    return hits


# -- harnesses ------------------------------------------------------------------------------------

def avg_delta(scores: Sequence[float], base: Sequence[float]) -> float | None:
    """Mean relative improvement over the base row (as a fraction); metrics with a zero base are skipped."""
    rel = [(s - b) / b for s, b in zip(scores, base) if b > 0]
    return float(np.mean(rel)) if rel else None


@dataclass
class AblationRow:
    name: str
    metrics: dict
    train_nll: float
    avg_delta: float | None


def _fit_and_score(name: str, ablation: AblationConfig, vocab: Vocabulary, train_set, eval_set,
                   model_cfg: ModelConfig, train_cfg: TrainConfig, bank, decode: DecodeConfig):
    model = build_model(vocab, model_cfg, ablation, train_cfg, bank)
    trainer = Trainer(model, vocab, train_set, train_cfg)
    log = trainer.fit()
    preds = [vocab.decode_tokens(ids) for ids in generate_reports(model, vocab, eval_set, decode)]
    refs = [vocab.decode_tokens(vocab.encode(s.report)) for s in eval_set]
    report = evaluate(preds, refs)
    logger.info("%s: nll %.4f %s", name, log.final_nll, report.to_dict())
    return report, log.final_nll


def run_ablation(train_set: Sequence[Sample], eval_set: Sequence[Sample], vocab: Vocabulary,
                 model_cfg: ModelConfig, train_cfg: TrainConfig, bank: ReportBank | None,
                 configs: dict[str, AblationConfig] | None = None,
                 decode: DecodeConfig = DecodeConfig()) -> list[AblationRow]:
    configs = dict(configs or ABLATIONS)
    if len(configs) < 2:
        raise ContractError("an ablation needs at least two configurations")
    rows = []
    base_scores = None
    for name, ablation in configs.items():
        report, nll = _fit_and_score(name, ablation, vocab, train_set, eval_set, model_cfg, train_cfg, bank, decode)
        scores = report.scores()
        if base_scores is None:
            base_scores = scores
            delta = None
        else:
            delta = avg_delta(scores, base_scores)
        rows.append(AblationRow(name, report.to_dict(), nll, delta))
    return rows


def format_table(rows: Sequence[AblationRow], first_column: str = "Method") -> str:
    header = [first_column] + [m.upper() if m.startswith("bleu") else m for m in METRIC_NAMES] + ["NLL", "AVG.Δ"]
    lines = [" | ".join(f"{h:>11}" for h in header)]
    for row in rows:
        cells = [row.name] + [f"{100 * row.metrics[m]:.2f}" for m in METRIC_NAMES] + [f"{row.train_nll:.4f}"]
        cells.append("-" if row.avg_delta is None else f"{100 * row.avg_delta:+.1f}%")
        lines.append(" | ".join(f"{c:>11}" for c in cells))
    return "\n".join(lines)


def topk_sweep(train_set, eval_set, vocab: Vocabulary, model_cfg: ModelConfig, train_cfg: TrainConfig,
               bank: ReportBank, ks: Sequence[int] = (1, 4, 8, 16, 32),
               decode: DecodeConfig = DecodeConfig()) -> list[dict]:
    series = []
    for k in ks:
        if k > len(bank):
            raise ContractError(f"top-k {k} exceeds bank size {len(bank)}")
        cfg_k = replace(model_cfg, top_k=k)
        report, nll = _fit_and_score(f"k={k}", ABLATIONS["Ours"], vocab, train_set, eval_set, cfg_k, train_cfg,
                                     bank, decode)
        series.append({"k": k, "train_nll": nll, **report.to_dict()})
    return series


def build_training_vocab(samples: Sequence[Sample], extra_reports: Sequence[str] = (), min_count: int = 3) -> Vocabulary:
    return build_vocab([s.report for s in samples] + list(extra_reports), min_count)
