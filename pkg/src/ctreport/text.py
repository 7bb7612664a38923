"""Tokenisation, vocabulary and caption metrics (corpus BLEU, ROUGE-L, exact-match METEOR)."""

from __future__ import annotations

import math
import string
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

from .tensor import ContractError

PAD, BOS, EOS, UNK = "<pad>", "<start>", "<end>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
_PUNCT = set(string.punctuation)


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, peel leading/trailing punctuation into separate tokens."""
    tokens: list[str] = []
    for chunk in text.lower().split():
        lead = []
        while chunk and chunk[0] in _PUNCT:
            lead.append(chunk[0])
            chunk = chunk[1:]
        trail = []
        while chunk and chunk[-1] in _PUNCT:
            trail.append(chunk[-1])
            chunk = chunk[:-1]
        tokens.extend(lead)
        if chunk:
            tokens.append(chunk)
        tokens.extend(reversed(trail))
    return tokens


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


class Vocabulary:
    """Token <-> id bijection with the four specials at ids 0..3."""

    def __init__(self, tokens: Sequence[str], min_count: int = 3):
        self.itos = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        self.min_count = min_count

    pad_id, bos_id, eos_id, unk_id = 0, 1, 2, 3

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, self.unk_id)

    def encode(self, text: str) -> list[int]:
        return [self.id(t) for t in tokenize(text)]

    def decode_tokens(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if i == self.eos_id:
                break
            if i in (self.pad_id, self.bos_id):
                continue
            out.append(self.itos[i])
        return out

    def decode(self, ids: Iterable[int]) -> str:
        return detokenize(self.decode_tokens(ids))

    def to_dict(self) -> dict:
        return {"tokens": self.itos[len(SPECIALS):], "min_count": self.min_count}

    @classmethod
    def from_dict(cls, payload: dict) -> Vocabulary:
        return cls(payload["tokens"], payload.get("min_count", 3))


def build_vocab(corpus: Sequence[str], min_count_exclusive: int = 3) -> Vocabulary:
    """Keep tokens seen strictly more than ``min_count_exclusive`` times; ids by (count desc, token)."""
    if not corpus:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    counts = Counter(tok for text in corpus for tok in tokenize(text))
    kept = sorted((t for t, c in counts.items() if c > min_count_exclusive), key=lambda t: (-counts[t], t))
    return Vocabulary(kept, min_count_exclusive)


# -- metrics --------------------------------------------------------------------------

def _as_tokens(x) -> list[str]:
    return tokenize(x) if isinstance(x, str) else list(x)


def _is_single(x) -> bool:
    """A bare string or a flat token list is one sentence, not a corpus."""
    return isinstance(x, str) or (len(x) > 0 and isinstance(x[0], str))


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates, references, max_n: int = 4) -> list[float]:
    """Corpus BLEU-1..max_n: clipped n-gram precision, geometric mean, brevity penalty, no smoothing."""
    if len(candidates) != len(references):
        raise ContractError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ContractError("BLEU needs a non-empty corpus")
    matched = [0] * max_n
    total = [0] * max_n
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        cand, ref = _as_tokens(cand), _as_tokens(ref)
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            c_counts, r_counts = _ngrams(cand, n), _ngrams(ref, n)
            matched[n - 1] += sum(min(c, r_counts[g]) for g, c in c_counts.items())
            total[n - 1] += max(len(cand) - n + 1, 0)
    if cand_len == 0:
        return [0.0] * max_n
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    scores = []
    log_sum = 0.0
    for n in range(max_n):
        if matched[n] == 0 or total[n] == 0:
            # a zero precision order zeroes this and every higher order
            scores.extend([0.0] * (max_n - n))
            break
        log_sum += math.log(matched[n] / total[n])
        scores.append(bp * math.exp(log_sum / (n + 1)))
    return scores


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(candidate, reference, beta: float = 1.2) -> float:
    cand, ref = _as_tokens(candidate), _as_tokens(reference)
    if not cand or not ref:
        raise ContractError("ROUGE-L needs non-empty candidate and reference")
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    rec, prec = lcs / len(ref), lcs / len(cand)
    return (1 + beta ** 2) * rec * prec / (rec + beta ** 2 * prec)


def rouge_l(candidates, references, beta: float = 1.2) -> float:
    """Mean per-pair LCS F-measure."""
    if _is_single(candidates):
        return rouge_l_pair(candidates, references, beta)
    if len(candidates) != len(references) or not candidates:
        raise ContractError("ROUGE-L needs equally sized, non-empty corpora")
    return sum(rouge_l_pair(c, r, beta) for c, r in zip(candidates, references)) / len(candidates)


def _align(cand: list[str], ref: list[str]) -> list[tuple[int, int]]:
    """Exact-match alignment by greedy longest-common-run tiling.

    Tiling continues until no unmatched token is shared, so the number of
    matches is maximal; taking longest runs first keeps the chunk count low.
    """
    used_c = [False] * len(cand)
    used_r = [False] * len(ref)
    pairs: list[tuple[int, int]] = []
    while True:
        best = (0, 0, 0)  # length, cand start, ref start
        for i in range(len(cand)):
            if used_c[i]:
                continue
            for j in range(len(ref)):
                if used_r[j] or cand[i] != ref[j]:
                    continue
                n = 1
                while (i + n < len(cand) and j + n < len(ref) and not used_c[i + n] and not used_r[j + n]
                       and cand[i + n] == ref[j + n]):
                    n += 1
                if n > best[0]:
                    best = (n, i, j)
        n, i, j = best
        if n == 0:
            return sorted(pairs)
        for s in range(n):
            used_c[i + s] = used_r[j + s] = True
            pairs.append((i + s, j + s))


def count_chunks(pairs: Sequence[tuple[int, int]]) -> int:
    """Runs of alignment pairs that are contiguous in both sequences (pairs sorted by candidate index)."""
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_lite_pair(candidate, reference) -> float:
    cand, ref = _as_tokens(candidate), _as_tokens(reference)
    if not cand or not ref:
        raise ContractError("meteor_lite needs non-empty candidate and reference")
    pairs = _align(cand, ref)
    matches = len(pairs)
    if matches == 0:
        return 0.0
    prec, rec = matches / len(cand), matches / len(ref)
    f_mean = 10 * prec * rec / (rec + 9 * prec)
    penalty = 0.5 * (count_chunks(pairs) / matches) ** 3
    return f_mean * (1 - penalty)


def meteor_lite(candidates, references) -> float:
    """Mean per-pair exact-match METEOR (no stemming, no synonyms)."""
    if _is_single(candidates):
        return meteor_lite_pair(candidates, references)
    if len(candidates) != len(references) or not candidates:
        raise ContractError("meteor_lite needs equally sized, non-empty corpora")
    return sum(meteor_lite_pair(c, r) for c, r in zip(candidates, references)) / len(candidates)


@dataclass
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    meteor_lite: float
    rougeL: float
    pairs: int

    def to_dict(self) -> dict:
        return asdict(self)

    def scores(self) -> list[float]:
        return [self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.meteor_lite, self.rougeL]


METRIC_NAMES = ("bleu1", "bleu2", "bleu3", "bleu4", "meteor_lite", "rougeL")


def evaluate(candidates: Sequence, references: Sequence, beta: float = 1.2) -> MetricReport:
    cands = [_as_tokens(c) for c in candidates]
    refs = [_as_tokens(r) for r in references]
    b = bleu(cands, refs, 4)
    # empty generations score zero rather than aborting a whole evaluation
    safe = [(c, r) for c, r in zip(cands, refs) if r]
    rl = sum(rouge_l_pair(c, r, beta) if c else 0.0 for c, r in safe) / len(safe)
    mt = sum(meteor_lite_pair(c, r) if c else 0.0 for c, r in safe) / len(safe)
    return MetricReport(*b, meteor_lite=mt, rougeL=rl, pairs=len(cands))
