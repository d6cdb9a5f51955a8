"""Step verifiers: relevance, logical consistency, arithmetic accuracy, perplexity.

LLM-backed verifiers sample several generations per step and map each to a
binary verdict; the step score is the mean verdict. Perplexity is computed
directly from the step's token logprobs.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from .backend import CompletionRequest
from .core import ReasoningChain
from .errors import (
    EmptyTokenList,
    EmptyVerdicts,
    InvalidPerplexity,
    JsonParseError,
    MissingLogprobs,
    UnknownOperator,
)
from .mathcheck import (
    ToleranceSpec,
    check_formula,
    extract_marked_formulas,
    parse_formula_json,
)


class VerifierKind(str, enum.Enum):
    RELEVANCE = "relevance"
    CONSISTENCY = "consistency"
    MATH_ACCURACY = "math_accuracy"
    PERPLEXITY = "perplexity"


ALL_KINDS = tuple(VerifierKind)


@dataclass(frozen=True)
class Verdict:
    kind: VerifierKind
    value: int
    raw_output: str = ""
    parse_ok: bool = True

    def __post_init__(self):
        if self.value not in (0, 1):
            raise ValueError(f"verdict value must be 0 or 1, got {self.value}")


@dataclass(frozen=True)
class StepScore:
    step_index: int
    kind: VerifierKind
    score: float
    n_samples: int
    verdicts: tuple[Verdict, ...] = ()

    def to_dict(self, chain_id: str) -> dict:
        return {
            "chain_id": chain_id,
            "step_index": self.step_index,
            "kind": self.kind.value,
            "score": self.score,
            "n_samples": self.n_samples,
            "verdicts": [{"value": v.value, "parse_ok": v.parse_ok} for v in self.verdicts],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StepScore":
        kind = VerifierKind(d["kind"])
        verdicts = tuple(Verdict(kind, int(v["value"]), "", bool(v["parse_ok"])) for v in d["verdicts"])
        return cls(int(d["step_index"]), kind, float(d["score"]), int(d["n_samples"]), verdicts)


# ---------------------------------------------------------------- prompts


class PromptCatalog:
    """Verifier prompt templates, one text file per verifier.

    Placeholders ``{problem}``, ``{previous_steps}`` and ``{current_step}`` are
    substituted literally (templates contain JSON braces, so no str.format).
    """

    FILES = {
        VerifierKind.RELEVANCE: "relevance.txt",
        VerifierKind.CONSISTENCY: "consistency.txt",
        VerifierKind.MATH_ACCURACY: "math_accuracy.txt",
    }
    EXEMPLARS = "math_exemplars.jsonl"

    def __init__(self, templates: dict, exemplars: list[dict], digest: str):
        self.templates = templates
        self.exemplars = exemplars
        self.digest = digest

    @classmethod
    def load(cls, directory=None) -> "PromptCatalog":
        root = Path(directory) if directory else resources.files("chainverify") / "prompts"
        h = hashlib.sha256()
        templates = {}
        for kind, name in cls.FILES.items():
            text = (root / name).read_text(encoding="utf-8")
            h.update(name.encode() + b"\0" + text.encode("utf-8"))
            templates[kind] = text.rstrip()
        exemplars = []
        ex = root / cls.EXEMPLARS
        if ex.is_file():
            raw = ex.read_text(encoding="utf-8")
            h.update(cls.EXEMPLARS.encode() + b"\0" + raw.encode("utf-8"))
            exemplars = [json.loads(line) for line in raw.splitlines() if line.strip()]
        return cls(templates, exemplars, "sha256:" + h.hexdigest())

    def render(self, kind: VerifierKind, problem: str = "", previous_steps: Sequence[str] = (), current_step: str = "") -> str:
        text = self.templates[kind]
        if kind is VerifierKind.MATH_ACCURACY:
            text = text.replace("{exemplars}", self._exemplar_block())
        return (
            text.replace("{problem}", problem)
            .replace("{previous_steps}", "\n".join(previous_steps))
            .replace("{current_step}", current_step)
        )

    def _exemplar_block(self) -> str:
        parts = []
        for ex in self.exemplars:
            out = ex["output"]
            body = f"{out}\n" if out else ""
            parts.append(f"Input:\n{ex['input']}\n\nOutput:\n```json\n{body}```\n\n")
        return "".join(parts)


_DEFAULT_CATALOG: Optional[PromptCatalog] = None


def default_catalog() -> PromptCatalog:
    global _DEFAULT_CATALOG
    if _DEFAULT_CATALOG is None:
        _DEFAULT_CATALOG = PromptCatalog.load()
    return _DEFAULT_CATALOG


# --------------------------------------------------------- verdict parsing

# (pattern, value). The earliest match in the output wins; at equal offsets
# the longer match wins, which lets negated phrases beat the phrase they contain.
VERDICT_PATTERNS = {
    VerifierKind.RELEVANCE: [
        (r"\bnot relevant\b", 0),
        (r"\birrelevant\b", 0),
        (r"^no\b", 0),
        (r"^yes\b", 1),
        (r"\bthe solution is relevant\b", 1),
        (r"\bis relevant\b", 1),
    ],
    VerifierKind.CONSISTENCY: [
        (r"\bnot contradict\w*", 1),
        (r"\bdoes not contradict\w*", 1),
        (r"\bdoesn'?t contradict\w*", 1),
        (r"\bno contradictions?\b", 1),
        (r"\bnon-contradictory\b", 1),
        (r"\bnot inconsistent\b", 1),
        (r"\bnot consistent\b", 0),
        (r"\binconsistent\b", 0),
        (r"\bconsistent\b", 1),
        (r"\bcontradict\w*", 0),
    ],
}
_COMPILED = {k: [(re.compile(p), v) for p, v in pats] for k, pats in VERDICT_PATTERNS.items()}


def parse_verdict(kind: VerifierKind, raw_output: str) -> Verdict:
    kind = VerifierKind(kind)
    if kind not in _COMPILED:
        raise ValueError(f"no verdict patterns for {kind.value}")
    text = raw_output.strip().lower()
    best = None
    for rx, value in _COMPILED[kind]:
        m = rx.search(text)
        if m is None:
            continue
        rank = (m.start(), -(m.end() - m.start()))
        if best is None or rank < best[0]:
            best = (rank, value)
    if best is None:
        return Verdict(kind, 0, raw_output, parse_ok=False)
    return Verdict(kind, best[1], raw_output, parse_ok=True)


# ------------------------------------------------------------ perplexity


def step_perplexity(token_logprobs: Sequence[float]) -> float:
    if not token_logprobs:
        raise EmptyTokenList("perplexity of an empty token list")
    return math.exp(-math.fsum(token_logprobs) / len(token_logprobs))


def perplexity_score(ppl: float) -> float:
    if ppl < 1 - 1e-9:
        raise InvalidPerplexity(f"perplexity {ppl} < 1")
    return 1.0 / max(ppl, 1.0)


def expectation_score(verdicts: Sequence[Verdict]) -> float:
    if not verdicts:
        raise EmptyVerdicts("no verdicts to average")
    kinds = {v.kind for v in verdicts}
    if len(kinds) > 1:
        raise ValueError(f"mixed verdict kinds: {sorted(k.value for k in kinds)}")
    return sum(v.value for v in verdicts) / len(verdicts)


def score_perplexity(step_index: int, token_logprobs: Optional[Sequence[float]]) -> StepScore:
    if token_logprobs is None:
        raise MissingLogprobs(f"step {step_index} has no token logprobs; the backend must supply them")
    return StepScore(step_index, VerifierKind.PERPLEXITY, perplexity_score(step_perplexity(token_logprobs)), 1)


# --------------------------------------------------------- LLM verifiers


@dataclass
class SamplingParams:
    temperature: float = 0.7
    max_tokens: int = 128


def _sample(backend, prompt: str, n: int, tag: str, params: SamplingParams, stop=None) -> list[str]:
    out = []
    for i in range(n):
        req = CompletionRequest(prompt, params.temperature, params.max_tokens, False, stop, f"{tag}:s{i}")
        out.append(backend.complete(req).text)
    return out


def _binary_score(step_index, kind, verdicts) -> StepScore:
    verdicts = tuple(verdicts)
    return StepScore(step_index, kind, expectation_score(verdicts), len(verdicts), verdicts)


def verify_relevance(
    backend,
    question: str,
    previous_steps: Sequence[str],
    candidate_step: str,
    n_samples: int = 5,
    *,
    step_index: int = 0,
    params: SamplingParams = SamplingParams(),
    catalog: Optional[PromptCatalog] = None,
) -> StepScore:
    if not candidate_step or n_samples < 1:
        raise ValueError("need a non-empty step and n_samples >= 1")
    catalog = catalog or default_catalog()
    prompt = catalog.render(VerifierKind.RELEVANCE, question, previous_steps, candidate_step)
    outs = _sample(backend, prompt, n_samples, "relevance", params)
    return _binary_score(step_index, VerifierKind.RELEVANCE, (parse_verdict(VerifierKind.RELEVANCE, o) for o in outs))


def verify_consistency(
    backend,
    previous_steps: Sequence[str],
    candidate_step: str,
    n_samples: int = 5,
    *,
    step_index: int = 0,
    params: SamplingParams = SamplingParams(),
    catalog: Optional[PromptCatalog] = None,
) -> StepScore:
    if not candidate_step or n_samples < 1:
        raise ValueError("need a non-empty step and n_samples >= 1")
    catalog = catalog or default_catalog()
    prompt = catalog.render(VerifierKind.CONSISTENCY, "", previous_steps, candidate_step)
    outs = _sample(backend, prompt, n_samples, "consistency", params)
    return _binary_score(step_index, VerifierKind.CONSISTENCY, (parse_verdict(VerifierKind.CONSISTENCY, o) for o in outs))


def _math_verdict(raw: str, tolerance: ToleranceSpec) -> Optional[Verdict]:
    """Verdict for one extraction output, or None when it does not parse."""
    if not raw.strip().strip("`").strip():
        return Verdict(VerifierKind.MATH_ACCURACY, 1, raw, True)
    try:
        formulas = parse_formula_json(raw)
    except (JsonParseError, UnknownOperator):
        return None
    ok = all(check_formula(f, tolerance) for f in formulas)
    return Verdict(VerifierKind.MATH_ACCURACY, int(ok), raw, True)


def verify_math(
    backend,
    candidate_step: str,
    n_samples: int = 5,
    tolerance: ToleranceSpec = ToleranceSpec(),
    *,
    step_index: int = 0,
    params: SamplingParams = SamplingParams(),
    catalog: Optional[PromptCatalog] = None,
) -> StepScore:
    """Arithmetic accuracy of one step.

    ``<<lhs=rhs>>`` markers are checked directly with no backend call.
    Otherwise the extraction prompt is sampled ``n_samples`` times; an output
    that fails to parse is re-requested once and then counted as a vacuous
    pass with ``parse_ok=False``. Steps without calculations pass.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    marked = extract_marked_formulas(candidate_step)
    if marked:
        ok = all(check_formula(f, tolerance) for f in marked)
        return _binary_score(step_index, VerifierKind.MATH_ACCURACY, [Verdict(VerifierKind.MATH_ACCURACY, int(ok))])

    catalog = catalog or default_catalog()
    prompt = catalog.render(VerifierKind.MATH_ACCURACY, current_step=candidate_step)
    verdicts = []
    for i in range(n_samples):
        tag = f"math_accuracy:s{i}"
        raw = backend.complete(CompletionRequest(prompt, params.temperature, params.max_tokens, False, ("```",), tag)).text
        v = _math_verdict(raw, tolerance)
        if v is None:
            raw = backend.complete(
                CompletionRequest(prompt, params.temperature, params.max_tokens, False, ("```",), tag + ":retry")
            ).text
            v = _math_verdict(raw, tolerance) or Verdict(VerifierKind.MATH_ACCURACY, 1, raw, parse_ok=False)
        verdicts.append(v)
    return _binary_score(step_index, VerifierKind.MATH_ACCURACY, verdicts)


@dataclass
class VerifierSuite:
    """Runs a fixed set of verifiers over every step of a chain."""

    backend: object
    kinds: tuple = ALL_KINDS
    n_samples: int = 5
    tolerance: ToleranceSpec = field(default_factory=ToleranceSpec)
    params: SamplingParams = field(default_factory=SamplingParams)
    catalog: Optional[PromptCatalog] = None

    def __post_init__(self):
        # canonical order keeps score files independent of config ordering
        self.kinds = tuple(k for k in ALL_KINDS if k in {VerifierKind(x) for x in self.kinds})
        if self.catalog is None:
            self.catalog = default_catalog()

    def score_step(self, question: str, chain: ReasoningChain, index: int) -> list[StepScore]:
        step = chain.steps[index]
        previous = [s.text for s in chain.steps[:index]]
        out = []
        for kind in self.kinds:
            if kind is VerifierKind.RELEVANCE:
                out.append(verify_relevance(self.backend, question, previous, step.text, self.n_samples,
                                            step_index=index, params=self.params, catalog=self.catalog))
            elif kind is VerifierKind.CONSISTENCY:
                out.append(verify_consistency(self.backend, previous, step.text, self.n_samples,
                                              step_index=index, params=self.params, catalog=self.catalog))
            elif kind is VerifierKind.MATH_ACCURACY:
                out.append(verify_math(self.backend, step.text, self.n_samples, self.tolerance,
                                       step_index=index, params=self.params, catalog=self.catalog))
            else:
                out.append(score_perplexity(index, step.token_logprobs))
        return out

    def score_chain(self, question: str, chain: ReasoningChain) -> list[StepScore]:
        out = []
        for i in range(len(chain.steps)):
            out.extend(self.score_step(question, chain, i))
        return out
