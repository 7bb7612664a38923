"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import ContractError, NonFiniteError, Tensor, no_grad


@dataclass
class CoordinateResult:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def error(self) -> float:
        return abs(self.analytic - self.numeric) / max(1.0, abs(self.analytic))


@dataclass
class GradCheckReport:
    tolerance: float
    results: list[CoordinateResult] = field(default_factory=list)

    @property
    def checked(self) -> int:
        return len(self.results)

    @property
    def max_error(self) -> float:
        return max((r.error for r in self.results), default=0.0)

    @property
    def passed(self) -> bool:
        return all(r.error <= self.tolerance for r in self.results)

    def worst(self, n: int = 5) -> list[CoordinateResult]:
        return sorted(self.results, key=lambda r: r.error, reverse=True)[:n]

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [f"{status}: {self.checked} coordinates, max relative error {self.max_error:.3e} "
                 f"(tolerance {self.tolerance:.1e})"]
        for r in self.worst():
            lines.append(f"  {r.name}{list(r.index)}: analytic={r.analytic:.8e} numeric={r.numeric:.8e} "
                         f"err={r.error:.2e}")
        return "\n".join(lines)


def _as_named(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    if isinstance(params, Tensor):
        return [("param", params)]
    return [(f"param{i}", p) for i, p in enumerate(params)]


def _evaluate(f: Callable[[], Tensor], name: str, index: tuple) -> float:
    with no_grad():
        value = float(f().data)
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite loss while perturbing {name}{list(index)}")
    return value


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Sequence[Tensor] | Tensor,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    n_samples: int | None = 50,
    rng: np.random.Generator | None = None,
    analytic: Mapping[str, np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare ``d f / d params`` from ``backward`` with central differences.

    ``f`` must be deterministic and return a scalar tensor. ``n_samples=None``
    checks every coordinate; otherwise each tensor gets at least one sampled
    coordinate and the remainder is drawn uniformly. ``analytic`` overrides
    the backward pass (used to feed deliberately wrong gradients).
    """
    named = _as_named(params)
    for name, p in named:
        if p.dtype != np.float64:
            raise ContractError(f"finite_diff_check needs float64 parameters; {name} is {p.dtype}")
    rng = rng or np.random.default_rng(0)

    if analytic is None:
        for _, p in named:
            p.grad = None
        loss = f()
        if not np.isfinite(loss.data):
            raise NonFiniteError("non-finite loss at the unperturbed point")
        loss.backward()
        analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for name, p in named}

    sizes = np.array([p.size for _, p in named])
    total = int(sizes.sum())
    if n_samples is None or n_samples >= total:
        picks = np.arange(total)
    else:
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        guaranteed = offsets + np.array([rng.integers(s) for s in sizes])
        guaranteed = guaranteed[: n_samples]
        rest = np.setdiff1d(np.arange(total), guaranteed)
        extra = rng.choice(rest, size=n_samples - len(guaranteed), replace=False)
        picks = np.sort(np.concatenate([guaranteed, extra]))

    bounds = np.cumsum(sizes)
    report = GradCheckReport(tolerance=tolerance)
    for flat in picks:
        which = int(np.searchsorted(bounds, flat, side="right"))
        name, p = named[which]
        local = int(flat - (bounds[which] - sizes[which]))
        index = np.unravel_index(local, p.shape)
        original = p.data[index].copy()
        p.data[index] = original + step
        plus = _evaluate(f, name, index)
        p.data[index] = original - step
        minus = _evaluate(f, name, index)
        p.data[index] = original
        numeric = (plus - minus) / (2.0 * step)
        report.results.append(CoordinateResult(name, tuple(int(i) for i in index),
                                               float(analytic[name][index]), numeric))
    return report
