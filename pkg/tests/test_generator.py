import math

import numpy as np
import pytest

from ctreport import tensor as T
from ctreport.generator import DecodeConfig, ReportGenerator, log_probs, memory_response, probabilities
from ctreport.tensor import ContractError, Tensor, no_grad


@pytest.fixture
def generator():
    return ReportGenerator(7, 8, np.random.default_rng(5), memory_slots=6, layers=2)


@pytest.fixture
def encoded(generator, rng):
    return generator.encode(Tensor(rng.standard_normal((5, 8))))


def test_decode_defaults():
    cfg = DecodeConfig()
    assert (cfg.strategy, cfg.beam_width, cfg.max_length) == ("beam", 3, 150)


def test_memory_response_modes(f64, rng):
    x, m = rng.standard_normal((3, 4)), rng.standard_normal((5, 4))
    scores = x @ m.T / 2.0
    literal = memory_response(Tensor(x), Tensor(m), "literal").data
    np.testing.assert_allclose(literal, scores @ m, atol=1e-12)
    weights = np.exp(scores) / np.exp(scores).sum(-1, keepdims=True)
    np.testing.assert_allclose(memory_response(Tensor(x), Tensor(m)).data, weights @ m, atol=1e-12)
    with pytest.raises(ValueError):
        memory_response(Tensor(x), Tensor(m), "cosine")


def test_output_distribution_sums_to_one(generator, encoded):
    logits = generator.decode_step(encoded, [1, 4, 5])
    assert probabilities(logits).sum() == pytest.approx(1.0, abs=1e-6)


def test_teacher_forcing_matches_step_decoding(generator, encoded):
    prefix = [1, 4, 5, 6]
    with no_grad():
        full = generator.decode(encoded, np.array([prefix])).data[0]
    for t in range(1, len(prefix) + 1):
        np.testing.assert_allclose(generator.decode_step(encoded, prefix[:t]), full[t - 1], atol=1e-5)


def test_decode_step_contracts(generator, encoded):
    with pytest.raises(ContractError):
        generator.decode_step(encoded, [4, 5])
    with pytest.raises(ContractError):
        generator.decode_step(encoded, [1] * 6, max_length=5)
    with pytest.raises(ContractError):
        generator.encode(Tensor(np.zeros((0, 8))))


def test_generation_respects_max_length(generator, encoded):
    for strategy in ("greedy", "beam"):
        ids = generator.generate(encoded, DecodeConfig(strategy, max_length=4))
        assert len(ids) <= 4


@pytest.mark.parametrize("seed", range(5))
def test_beam_one_is_greedy(seed):
    gen = ReportGenerator(9, 8, np.random.default_rng(seed), memory_slots=4, layers=1)
    enc = gen.encode(Tensor(np.random.default_rng(100 + seed).standard_normal((4, 8))))
    greedy = gen.generate(enc, DecodeConfig("greedy", max_length=12))
    assert gen.generate(enc, DecodeConfig("beam", beam_width=1, max_length=12)) == greedy


def brute_force_best(gen, enc, max_length, alpha):
    """Enumerate every hypothesis up to max_length; score = log p / length ** alpha."""
    best, best_score = None, -math.inf

    def visit(seq, logp):
        nonlocal best, best_score
        if len(seq) > 1 and (seq[-1] == gen.eos_id or len(seq) - 1 == max_length):
            score = logp / (len(seq) - 1) ** alpha
            if score > best_score + 1e-12:
                best, best_score = seq[1:], score
            return
        lp = log_probs(gen.decode_step(enc, seq).astype(np.float64))
        for token in range(len(lp)):
            visit(seq + [token], logp + lp[token])

    visit([gen.bos_id], 0.0)
    return best


def test_wide_beam_equals_exhaustive_search():
    gen = ReportGenerator(4, 6, np.random.default_rng(2), memory_slots=3, layers=1)
    with T.default_dtype(np.float64):
        gen.astype(np.float64)
        enc = gen.encode(Tensor(np.random.default_rng(3).standard_normal((3, 6))))
    gen.out.weight.data *= 200  # sharpen so that hypotheses differ clearly
    wide = DecodeConfig("beam", beam_width=4 ** 3, max_length=3)
    assert gen.generate(enc, wide) == brute_force_best(gen, enc, 3, 0.7)


def test_generate_rejects_batches(generator, rng):
    enc = generator.encode(Tensor(rng.standard_normal((2, 5, 8))))
    with pytest.raises(ContractError):
        generator.generate(enc)
