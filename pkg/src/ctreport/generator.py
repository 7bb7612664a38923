"""Cross-modal-memory encoder-decoder that turns fused visual features into report tokens."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import DecoderLayer, EncoderLayer, Embedding, LayerNorm, Linear, Module, normal, sinusoidal_positions
from .tensor import ContractError, DimensionError, Tensor, no_grad


def memory_response(x: Tensor, memory: Tensor, mode: str = "normalized") -> Tensor:
    """Query the memory matrix with every row of ``x``.

    ``normalized``: softmax(X M^T / sqrt(d)) M, a convex combination of memory rows.
    ``literal``: (X M^T / sqrt(d)) M with no normalisation.
    """
    d = memory.shape[-1]
    if x.shape[-1] != d:
        raise DimensionError(f"memory width {d} does not match feature width {x.shape[-1]}")
    scores = (x @ memory.T) * (1.0 / math.sqrt(d))
    if mode == "normalized":
        return T.softmax(scores) @ memory
    if mode == "literal":
        return scores @ memory
    raise ValueError(f"unknown memory mode '{mode}'")


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "beam"
    beam_width: int = 3
    max_length: int = 150
    length_penalty: float = 0.7

    def __post_init__(self):
        if self.strategy not in ("greedy", "beam"):
            raise ValueError(f"unknown decoding strategy '{self.strategy}'")
        if self.beam_width < 1 or self.max_length < 1:
            raise ValueError("beam width and max length must be >= 1")


class ReportGenerator(Module):
    def __init__(self, vocab_size: int, d_model: int, rng: np.random.Generator, memory_slots: int = 32,
                 layers: int = 3, heads: int = 1, memory_mode: str = "normalized", max_positions: int = 256,
                 bos_id: int = 1, eos_id: int = 2, pad_id: int = 0):
        self.d_model = d_model
        self.memory = normal(rng, (memory_slots, d_model), 1.0)
        self.memory_mode = memory_mode
        self.encoder_layers = [EncoderLayer(d_model, rng, heads=heads) for _ in range(layers)]
        self.encoder_norm = LayerNorm(d_model)
        self.embed = Embedding(vocab_size, d_model, rng, std=1.0)
        self.decoder_layers = [DecoderLayer(d_model, rng, heads=heads) for _ in range(layers)]
        self.decoder_norm = LayerNorm(d_model)
        self.out = Linear(d_model, vocab_size, rng, std=0.01)
        self._positions = sinusoidal_positions(max_positions, d_model)
        self.bos_id, self.eos_id, self.pad_id = bos_id, eos_id, pad_id

    @property
    def vocab_size(self) -> int:
        return self.out.weight.shape[1]

    def encode(self, source: Tensor) -> Tensor:
        """Memory responses of the fused source tokens through the encoder stack."""
        if source.shape[-2] == 0:
            raise ContractError("cannot encode an empty source sequence")
        x = memory_response(source, self.memory, self.memory_mode)
        for layer in self.encoder_layers:
            x = layer(x)
        return self.encoder_norm(x)

    def decode(self, encoded: Tensor, prefix_ids) -> Tensor:
        """Logits for every prefix position (teacher forcing); prefix_ids is (..., t)."""
        prefix_ids = np.asarray(prefix_ids)
        t = prefix_ids.shape[-1]
        if t > len(self._positions):
            raise ContractError(f"prefix length {t} exceeds the positional table ({len(self._positions)})")
        x = self.embed(prefix_ids)
        x = memory_response(x, self.memory, self.memory_mode)
        x = x + Tensor(self._positions[:t], dtype=x.dtype)
        for layer in self.decoder_layers:
            x = layer(x, encoded, causal=True)
        return self.out(self.decoder_norm(x))

    def decode_step(self, encoded: Tensor, prefix_ids, max_length: int = 150) -> np.ndarray:
        """Next-token logits after ``prefix_ids`` (which starts with the start token)."""
        prefix_ids = np.asarray(prefix_ids)
        if prefix_ids.ndim != 1 or prefix_ids.size == 0 or prefix_ids[0] != self.bos_id:
            raise ContractError("prefix must be a 1-D id sequence beginning with the start token")
        if prefix_ids.size > max_length:
            raise ContractError(f"prefix of {prefix_ids.size} tokens exceeds max length {max_length}")
        with no_grad():
            logits = self.decode(encoded, prefix_ids[None])
        return logits.data[0, -1]

    def generate(self, encoded: Tensor, cfg: DecodeConfig = DecodeConfig()) -> list[int]:
        """Generated ids (without start token; includes the end token if one was produced)."""
        if encoded.ndim == 3:
            if encoded.shape[0] != 1:
                raise ContractError("generate handles one source at a time")
            encoded = encoded[0]
        with no_grad():
            if cfg.strategy == "greedy":
                return self._greedy(encoded, cfg)
            return beam_search(self, encoded, cfg)

    def _greedy(self, encoded: Tensor, cfg: DecodeConfig) -> list[int]:
        ids = [self.bos_id]
        while len(ids) - 1 < cfg.max_length:
            nxt = int(np.argmax(self.decode_step(encoded, ids, cfg.max_length)))
            ids.append(nxt)
            if nxt == self.eos_id:
                break
        return ids[1:]


def log_probs(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def probabilities(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_probs(np.asarray(logits, dtype=np.float64)))


def beam_search(model: ReportGenerator, encoded: Tensor, cfg: DecodeConfig) -> list[int]:
    """Length-normalised beam search; score = sum(log p) / length ** alpha.

    Candidates are ranked by (score desc, parent rank asc, token id asc), so a
    width-1 beam takes exactly the greedy argmax at every step.
    """
    width = cfg.beam_width if cfg.strategy == "beam" else 1
    alive: list[tuple[list[int], float]] = [([model.bos_id], 0.0)]
    finished: list[tuple[list[int], float]] = []

    def norm(seq, logp):
        return logp / ((len(seq) - 1) ** cfg.length_penalty)

    for _ in range(cfg.max_length):
        prefixes = np.array([seq for seq, _ in alive])
        with no_grad():
            logits = model.decode(T.expand(encoded, (len(alive),) + encoded.shape), prefixes).data[:, -1]
        lp = log_probs(logits.astype(np.float64))
        totals = np.array([s for _, s in alive])[:, None] + lp
        flat = totals.reshape(-1)
        # stable sort on -score keeps (parent rank, token id) ascending among ties
        order = np.argsort(-flat, kind="stable")[:width]
        alive_next = []
        for idx in order:
            parent, token = divmod(int(idx), lp.shape[1])
            seq = alive[parent][0] + [token]
            entry = (seq, float(flat[idx]))
            (finished if token == model.eos_id else alive_next).append(entry)
        alive = alive_next
        if not alive:
            break
        if len(finished) >= width:
            break
    pool = finished + alive
    best = max(range(len(pool)), key=lambda i: (norm(*pool[i]), -i))
    return pool[best][0][1:]
