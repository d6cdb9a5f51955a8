"""Chain scores, single-chain selection strategies and answer voting."""

from __future__ import annotations

import math
import random
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional, Sequence

from .core import PrefixSpec, ReasoningChain, chain_prefix
from .errors import EmptyEntries, EmptyPool, EmptyScores, MissingLogprobs, MissingWeight
from .verifiers import ALL_KINDS, StepScore, VerifierKind

EPS = 1e-4
NEUTRAL_SCORE = 0.5

DEFAULT_WEIGHTS = {
    VerifierKind.PERPLEXITY: 2.0,
    VerifierKind.RELEVANCE: 1.0,
    VerifierKind.CONSISTENCY: 1.0,
    VerifierKind.MATH_ACCURACY: 1.0,
}


def make_weights(weights: Optional[Mapping] = None) -> dict[VerifierKind, float]:
    """Normalize a {kind: weight} mapping; missing kinds take the defaults."""
    out = dict(DEFAULT_WEIGHTS)
    for k, w in (weights or {}).items():
        w = float(w)
        if not w > 0:
            raise ValueError(f"weight for {k} must be positive, got {w}")
        out[VerifierKind(k)] = w
    return out


@dataclass(frozen=True)
class ChainScore:
    chain_id: str
    per_verifier: dict
    aggregate: float
    weights_used: dict
    n_steps_scored: int

    def to_dict(self) -> dict:
        return {
            "chain_id": self.chain_id,
            "per_verifier": {k.value: v for k, v in self.per_verifier.items()},
            "aggregate": self.aggregate,
            "weights_used": {k.value: v for k, v in self.weights_used.items()},
        }


@dataclass(frozen=True)
class VoteResult:
    winner: Optional[str]
    tally: dict = field(default_factory=dict)
    tie_broken: bool = False


def chain_verifier_score(step_scores: Sequence[float], eps: float = EPS) -> float:
    """Geometric mean of step scores, each floored at ``eps``."""
    if not step_scores:
        raise EmptyScores("no step scores")
    logs = [math.log(max(eps, s)) for s in step_scores]
    return math.exp(math.fsum(logs) / len(logs))


def aggregate_score(per_verifier: Mapping, weights: Optional[Mapping] = None) -> float:
    if not per_verifier:
        raise EmptyScores("no verifier scores to aggregate")
    weights = DEFAULT_WEIGHTS if weights is None else weights
    num = den = 0.0
    for kind, v in per_verifier.items():
        if kind not in weights:
            raise MissingWeight(f"no weight for verifier {getattr(kind, 'value', kind)}")
        w = weights[kind]
        num += w * v
        den += w
    return num / den


def score_chain(
    chain_id: str,
    step_scores: Iterable[StepScore],
    weights: Optional[Mapping] = None,
    kinds: Optional[Iterable] = None,
    eps: float = EPS,
) -> ChainScore:
    """GM per verifier over the scored steps, then the weighted aggregate.

    With no scored steps (an unscored prefix) the chain receives the neutral
    aggregate 0.5.
    """
    weights = make_weights(weights)
    wanted = set(VerifierKind(k) for k in kinds) if kinds is not None else None
    by_kind: dict[VerifierKind, list[float]] = {}
    steps = set()
    for s in step_scores:
        if wanted is not None and s.kind not in wanted:
            continue
        by_kind.setdefault(s.kind, []).append(s.score)
        steps.add(s.step_index)
    per = {k: chain_verifier_score(by_kind[k], eps) for k in ALL_KINDS if k in by_kind}
    used = {k: weights[k] for k in per}
    if not per:
        return ChainScore(chain_id, {}, NEUTRAL_SCORE, {}, 0)
    return ChainScore(chain_id, per, aggregate_score(per, used), used, len(steps))


def select_top(chain_scores: Sequence[ChainScore]) -> str:
    """Highest aggregate; ties go to the higher perplexity score, then the earlier chain."""
    if not chain_scores:
        raise EmptyPool("no chains to select from")
    return rank_top(chain_scores)[0]


def rank_top(chain_scores: Sequence[ChainScore]) -> list[str]:
    def key(item):
        i, cs = item
        ppl = cs.per_verifier.get(VerifierKind.PERPLEXITY, -math.inf)
        return (-cs.aggregate, -ppl, i)

    return [cs.chain_id for _, cs in sorted(enumerate(chain_scores), key=key)]


def chain_perplexity(chain: ReasoningChain) -> float:
    if not chain.has_logprobs:
        raise MissingLogprobs(f"chain {chain.chain_id} has no token logprobs")
    lps = chain.all_logprobs()
    return math.exp(-math.fsum(lps) / len(lps))


def rank_low_ppl(chains: Sequence[ReasoningChain]) -> list[str]:
    ppls = [chain_perplexity(c) for c in chains]
    order = sorted(range(len(chains)), key=lambda i: (ppls[i], i))
    return [chains[i].chain_id for i in order]


def select_low_ppl(chains: Sequence[ReasoningChain]) -> str:
    if not chains:
        raise EmptyPool("no chains to select from")
    return rank_low_ppl(chains)[0]


def select_random(chain_ids: Sequence[str], rng_seed) -> str:
    if not chain_ids:
        raise EmptyPool("no chains to select from")
    return chain_ids[random.Random(rng_seed).randrange(len(chain_ids))]


def sample_pool(chain_ids: Sequence[str], k: int, rng_seed) -> list[str]:
    """``k`` chains drawn uniformly without replacement, in pool order."""
    if not chain_ids:
        raise EmptyPool("no chains to select from")
    idx = sorted(random.Random(rng_seed).sample(range(len(chain_ids)), min(k, len(chain_ids))))
    return [chain_ids[i] for i in idx]


def weighted_vote(entries: Sequence[tuple[str, float]]) -> VoteResult:
    """Sum weights per answer.

    Ties go to the answer holding the single heaviest entry, then to the
    answer seen first.
    """
    if not entries:
        raise EmptyEntries("nothing to vote on")
    tally: OrderedDict[str, float] = OrderedDict()
    best_single: dict[str, float] = {}
    for answer, w in entries:
        if w < 0:
            raise ValueError(f"negative vote weight {w}")
        tally[answer] = tally.get(answer, 0.0) + w
        best_single[answer] = max(best_single.get(answer, -math.inf), w)
    top = max(tally.values())
    tied = [a for a, t in tally.items() if t == top]
    if len(tied) == 1:
        return VoteResult(tied[0], dict(tally), False)
    heaviest = max(best_single[a] for a in tied)
    tied = [a for a in tied if best_single[a] == heaviest]
    return VoteResult(tied[0], dict(tally), True)


def majority_vote(answers: Sequence[str]) -> VoteResult:
    if not answers:
        raise EmptyEntries("nothing to vote on")
    tally: OrderedDict[str, float] = OrderedDict()
    for a in answers:
        tally[a] = tally.get(a, 0) + 1
    top = max(tally.values())
    tied = [a for a, t in tally.items() if t == top]
    return VoteResult(tied[0], dict(tally), len(tied) > 1)


def score_with_prefix(
    question: str,
    chain: ReasoningChain,
    spec: PrefixSpec,
    suite,
    weights: Optional[Mapping] = None,
) -> ChainScore:
    """Verify only the prefix selected by ``spec`` and score the chain on it."""
    prefix = chain_prefix(chain, spec)
    if prefix.unscored:
        return ChainScore(chain.chain_id, {}, NEUTRAL_SCORE, {}, 0)
    return score_chain(chain.chain_id, suite.score_chain(question, prefix), weights)


def rank_normalize_perplexity(scores_by_chain: Mapping[str, Sequence[StepScore]]) -> dict[str, list[StepScore]]:
    """Replace perplexity step scores by their rank within one problem.

    The lowest-perplexity step scores 1.0 and the highest 1/N; equal
    perplexities share the better rank.
    """
    ppl_vals = sorted(
        {s.score for scores in scores_by_chain.values() for s in scores if s.kind is VerifierKind.PERPLEXITY},
        reverse=True,
    )
    if not ppl_vals:
        return {cid: list(v) for cid, v in scores_by_chain.items()}
    all_scores = [s.score for scores in scores_by_chain.values() for s in scores if s.kind is VerifierKind.PERPLEXITY]
    n = len(all_scores)
    # higher reciprocal perplexity = lower perplexity = better rank
    better = {v: sum(1 for x in all_scores if x > v) for v in ppl_vals}
    out = {}
    for cid, scores in scores_by_chain.items():
        out[cid] = [
            replace(s, score=1.0 - better[s.score] / n) if s.kind is VerifierKind.PERPLEXITY else s for s in scores
        ]
    return out
