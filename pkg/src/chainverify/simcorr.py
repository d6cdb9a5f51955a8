"""Monte Carlo study of selection accuracy versus verifier/judgment correlation.

Each simulated problem has ``chains_per_problem`` candidate chains of
``steps_per_chain`` steps. Human step judgments are Bernoulli draws; a chain
is correct when more than ``threshold`` of its steps are judged correct.
Verifier verdicts copy the human judgment with probability rho and are
otherwise independent Bernoulli draws with the same marginal, so verdict and
judgment have Pearson correlation rho. The chain with the highest mean
verdict is selected.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidParam

DEFAULT_CORRELATIONS = (0.0, 0.075, 0.1, 0.15, 0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class SimParams:
    n_problems: int = 2000
    chains_per_problem: int = 20
    steps_per_chain: int = 5
    # "fixed:<p>" gives every step the same correctness probability;
    # "uniform" draws one quality p ~ U(0, 1) per chain
    quality_prior: str = "fixed:0.5"
    threshold: float = 0.75
    correlations: tuple = DEFAULT_CORRELATIONS
    seed: int = 0

    def __post_init__(self):
        if self.n_problems < 1 or self.chains_per_problem < 1 or self.steps_per_chain < 1:
            raise InvalidParam("n_problems, chains_per_problem and steps_per_chain must be >= 1")
        if not 0 <= self.threshold < 1:
            raise InvalidParam("threshold must be in [0, 1)")
        for rho in self.correlations:
            if not 0 <= rho <= 1:
                raise InvalidParam(f"correlation {rho} outside [0, 1]")
        self.fixed_quality()

    def fixed_quality(self) -> Optional[float]:
        if self.quality_prior == "uniform":
            return None
        if self.quality_prior.startswith("fixed:"):
            p = float(self.quality_prior.split(":", 1)[1])
            if 0 < p < 1:
                return p
        raise InvalidParam(f"bad quality_prior {self.quality_prior!r}")

    def marginal(self) -> float:
        p = self.fixed_quality()
        return 0.5 if p is None else p

    def analytic_baseline(self) -> float:
        """P(chain correct) for a randomly chosen chain."""
        L = self.steps_per_chain
        need = math.floor(self.threshold * L) + 1
        p = self.fixed_quality()
        if p is None:
            # E over p ~ U(0,1) of P(Bin(L, p) >= need) = (L - need + 1) / (L + 1)
            return (L - need + 1) / (L + 1)
        return sum(math.comb(L, k) * p**k * (1 - p) ** (L - k) for k in range(need, L + 1))


@dataclass(frozen=True)
class SimResult:
    rho: float
    score: float
    baseline: float
    empirical_r: float


def correlated_verdict(h: int, rho: float, marginal_p: float, rng: np.random.Generator) -> int:
    if h not in (0, 1):
        raise InvalidParam(f"human verdict must be 0 or 1, got {h}")
    if not 0 <= rho <= 1:
        raise InvalidParam(f"rho {rho} outside [0, 1]")
    if not 0 < marginal_p < 1:
        raise InvalidParam(f"marginal_p {marginal_p} outside (0, 1)")
    if rng.random() < rho:
        return h
    return int(rng.random() < marginal_p)


def correlated_verdicts(h: np.ndarray, rho: float, marginal_p: float, copy_u: np.ndarray, noise_u: np.ndarray) -> np.ndarray:
    """Vectorized :func:`correlated_verdict` driven by pre-drawn uniforms."""
    return np.where(copy_u < rho, h, (noise_u < marginal_p).astype(h.dtype))


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a.ravel().astype(float)
    b = b.ravel().astype(float)
    if a.std() == 0 or b.std() == 0:
        return float("nan")
    return float(np.corrcoef(a, b)[0, 1])


def simulate(params: SimParams = SimParams()) -> list[SimResult]:
    """Selection score for each rho in ``params.correlations``.

    The same human judgments and uniforms are reused across the rho sweep, so
    differences between rows come from rho alone.
    """
    rng = np.random.default_rng(params.seed)
    N, M, L = params.n_problems, params.chains_per_problem, params.steps_per_chain
    fixed = params.fixed_quality()
    quality = np.full((N, M, 1), fixed) if fixed is not None else rng.uniform(size=(N, M, 1))
    human = (rng.uniform(size=(N, M, L)) < quality).astype(np.int8)
    correct = human.mean(axis=-1) > params.threshold
    copy_u = rng.uniform(size=human.shape)
    noise_u = rng.uniform(size=human.shape)
    random_pick = rng.integers(0, M, size=N)

    rows = np.arange(N)
    baseline = float(correct[rows, random_pick].mean())
    results = []
    for rho in params.correlations:
        v = correlated_verdicts(human, rho, params.marginal(), copy_u, noise_u)
        # argmax returns the first maximum: ties go to the lower chain index
        chosen = v.mean(axis=-1).argmax(axis=-1)
        score = float(correct[rows, chosen].mean())
        results.append(SimResult(float(rho), score, baseline, _pearson(v, human)))
    return results


def write_csv(results: list[SimResult], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["rho", "score", "baseline", "empirical_r"])
        for r in results:
            w.writerow([f"{r.rho:g}", f"{r.score:.6f}", f"{r.baseline:.6f}", f"{r.empirical_r:.6f}"])
