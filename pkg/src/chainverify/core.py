"""Domain types, step splitting, prefix truncation and token alignment."""

from __future__ import annotations

import bisect
import enum
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .errors import AlignmentError, EmptyChain, InvalidSpec

SCAFFOLD = "Let's think step by step."


class AnswerType(str, enum.Enum):
    NUMERIC = "numeric"
    MULTIPLE_CHOICE = "multiple_choice"
    YES_NO = "yes_no"
    STRING = "string"


@dataclass(frozen=True)
class Problem:
    id: str
    question: str
    gold_answer: str
    answer_type: AnswerType
    choices: Optional[tuple[tuple[str, str], ...]] = None


@dataclass(frozen=True)
class ReasoningStep:
    index: int
    text: str
    token_logprobs: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        if not self.text or "\n" in self.text:
            raise ValueError(f"invalid step text: {self.text!r}")
        if self.token_logprobs is not None:
            if not self.token_logprobs:
                raise ValueError("token_logprobs must be non-empty when present")
            if any(lp > 0 for lp in self.token_logprobs):
                raise ValueError("token logprobs must be <= 0")

    def to_dict(self) -> dict:
        lps = list(self.token_logprobs) if self.token_logprobs is not None else None
        return {"index": self.index, "text": self.text, "token_logprobs": lps}

    @classmethod
    def from_dict(cls, d: dict) -> "ReasoningStep":
        lps = d.get("token_logprobs")
        return cls(int(d["index"]), d["text"], tuple(float(x) for x in lps) if lps is not None else None)


@dataclass(frozen=True)
class ReasoningChain:
    chain_id: str
    problem_id: str
    steps: tuple[ReasoningStep, ...]
    raw_text: str
    extracted_answer: Optional[str] = None
    # set by chain_prefix(count=0): nothing left to verify
    unscored: bool = False

    def __post_init__(self):
        if not self.steps and not self.unscored:
            raise EmptyChain(f"chain {self.chain_id} has no steps")
        for i, s in enumerate(self.steps):
            if s.index != i:
                raise ValueError(f"step indices must be contiguous, got {s.index} at {i}")

    @property
    def has_logprobs(self) -> bool:
        return bool(self.steps) and all(s.token_logprobs is not None for s in self.steps)

    def all_logprobs(self) -> list[float]:
        out: list[float] = []
        for s in self.steps:
            if s.token_logprobs:
                out.extend(s.token_logprobs)
        return out

    def to_dict(self) -> dict:
        return {
            "chain_id": self.chain_id,
            "problem_id": self.problem_id,
            "raw_text": self.raw_text,
            "steps": [s.to_dict() for s in self.steps],
            "extracted_answer": self.extracted_answer,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReasoningChain":
        return cls(
            chain_id=d["chain_id"],
            problem_id=d["problem_id"],
            steps=tuple(ReasoningStep.from_dict(s) for s in d["steps"]),
            raw_text=d["raw_text"],
            extracted_answer=d.get("extracted_answer"),
        )


@dataclass(frozen=True)
class PrefixSpec:
    mode: str = "all"  # percent | count | all
    amount: float = 0

    def __post_init__(self):
        if self.mode == "percent":
            if not (0 < self.amount <= 100):
                raise InvalidSpec(f"percent must be in (0, 100], got {self.amount}")
        elif self.mode == "count":
            if self.amount < 0 or int(self.amount) != self.amount:
                raise InvalidSpec(f"count must be a non-negative integer, got {self.amount}")
        elif self.mode != "all":
            raise InvalidSpec(f"unknown prefix mode {self.mode!r}")

    def n_kept(self, n: int) -> int:
        if self.mode == "percent":
            # round first so 20% of 5 is exactly 1, not ceil(1.0000000000000002)
            return min(n, math.ceil(round(self.amount / 100 * n, 9)))
        if self.mode == "count":
            return min(int(self.amount), n)
        return n

    def label(self) -> str:
        if self.mode == "percent":
            return f"{self.amount:g}%"
        if self.mode == "count":
            return f"{int(self.amount)} steps"
        return "all"

    def to_dict(self) -> dict:
        return {"mode": self.mode, "amount": self.amount}


def _is_scaffold(line: str) -> bool:
    return line.rstrip(".").lower() == SCAFFOLD.rstrip(".").lower()


def _line_spans(raw_text: str, drop_scaffold: bool) -> list[tuple[int, int, str]]:
    spans = []
    pos = 0
    for line in raw_text.split("\n"):
        stripped = line.strip()
        if stripped and not (drop_scaffold and _is_scaffold(stripped)):
            start = pos + (len(line) - len(line.lstrip()))
            spans.append((start, start + len(stripped), stripped))
        pos += len(line) + 1
    return spans


def split_steps(raw_text: str, drop_scaffold: bool = True) -> list[ReasoningStep]:
    """Split a generation into reasoning steps, one per non-blank line.

    Lines equal to the zero-shot scaffold are dropped when ``drop_scaffold``
    is set; step markers such as "Step 3:" are kept verbatim.
    """
    steps = [ReasoningStep(i, text) for i, (_, _, text) in enumerate(_line_spans(raw_text, drop_scaffold))]
    if not steps:
        raise EmptyChain("no non-empty line in generation")
    return steps


def make_chain(
    chain_id: str,
    problem_id: str,
    raw_text: str,
    tokens: Optional[Sequence[tuple[str, float]]] = None,
    extracted_answer: Optional[str] = None,
) -> ReasoningChain:
    chain = ReasoningChain(chain_id, problem_id, tuple(split_steps(raw_text)), raw_text, extracted_answer)
    if tokens is not None:
        chain = assign_token_logprobs(chain, tokens)
    return chain


def chain_prefix(chain: ReasoningChain, spec: PrefixSpec) -> ReasoningChain:
    keep = spec.n_kept(len(chain.steps))
    if keep == len(chain.steps):
        return chain
    return replace(chain, steps=chain.steps[:keep], unscored=keep == 0)


def assign_token_logprobs(chain: ReasoningChain, tokens: Sequence[tuple[str, float]]) -> ReasoningChain:
    """Attach backend token logprobs to the steps they fall in.

    Token text must spell ``chain.raw_text`` up to whitespace. A token
    belongs to the step holding its first non-space character; whitespace-only
    tokens (newlines) belong to the step before them. Tokens on dropped lines
    join the nearest preceding step.
    """
    raw = chain.raw_text
    raw_pos = [i for i, c in enumerate(raw) if not c.isspace()]
    spans = _line_spans(raw, drop_scaffold=True)
    if len(spans) != len(chain.steps):
        raise AlignmentError("chain steps do not match raw_text")
    starts = [s for s, _, _ in spans]

    k = 0
    anchors: list[Optional[int]] = []
    for text, _ in tokens:
        anchor = raw_pos[k - 1] if k > 0 else None
        first = True
        for c in text:
            if c.isspace():
                continue
            if k >= len(raw_pos) or raw[raw_pos[k]] != c:
                raise AlignmentError(f"token stream diverges from raw_text at token {text!r}")
            if first:
                anchor = raw_pos[k]
                first = False
            k += 1
        anchors.append(anchor)
    if k != len(raw_pos):
        raise AlignmentError("token stream ends before raw_text")

    buckets: list[list[float]] = [[] for _ in spans]
    for anchor, (_, lp) in zip(anchors, tokens):
        idx = 0 if anchor is None else max(0, bisect.bisect_right(starts, anchor) - 1)
        buckets[idx].append(min(0.0, float(lp)))

    # a step whose first character was swallowed by a token starting earlier
    # borrows that token's logprob, so every step keeps a non-empty list
    for i, b in enumerate(buckets):
        if not b:
            j = max(t for t, a in enumerate(anchors) if a is None or a <= starts[i])
            b.append(min(0.0, float(tokens[j][1])))

    steps = tuple(replace(s, token_logprobs=tuple(b)) for s, b in zip(chain.steps, buckets))
    return replace(chain, steps=steps)


def write_jsonl(path, records: Iterable[dict]) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n")


def read_jsonl(path) -> list[dict]:
    out = []
    with Path(path).open(encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(json.loads(line))
    return out


def write_chains(path, chains: Iterable[ReasoningChain]) -> None:
    write_jsonl(path, (c.to_dict() for c in chains))


def read_chains(path) -> list[ReasoningChain]:
    return [ReasoningChain.from_dict(d) for d in read_jsonl(path)]
