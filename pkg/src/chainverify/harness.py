"""Experiment harness: datasets, answers, the generate/verify pipeline and trials."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .backend import BackendConfig, CachedBackend, CompletionRequest, ResponseCache, make_backend
from .core import (
    AnswerType,
    PrefixSpec,
    Problem,
    ReasoningChain,
    SCAFFOLD,
    chain_prefix,
    make_chain,
    read_jsonl,
    write_jsonl,
)
from .errors import (
    BackendError,
    ConstantInput,
    DuplicateId,
    EmptyChain,
    EmptySet,
    LengthMismatch,
    SchemaError,
    UnparseableAnswer,
)
from .mathcheck import ToleranceSpec
from .scoring import (
    ChainScore,
    majority_vote,
    make_weights,
    rank_low_ppl,
    rank_normalize_perplexity,
    rank_top,
    sample_pool,
    score_chain,
    select_random,
    weighted_vote,
)
from .verifiers import ALL_KINDS, PromptCatalog, SamplingParams, StepScore, VerifierKind, VerifierSuite

log = logging.getLogger(__name__)

SELECTION_MODES = ("random", "low_ppl", "top_verifier")
VOTE_MODES = ("majority", "weighted")


# ------------------------------------------------------------------ data


def _parse_choices(raw, line):
    if raw is None:
        return None
    if isinstance(raw, dict):
        items = list(raw.items())
    elif isinstance(raw, list):
        items = []
        for c in raw:
            if isinstance(c, dict):
                items.append((c.get("label"), c.get("text")))
            elif isinstance(c, (list, tuple)) and len(c) == 2:
                items.append(tuple(c))
            else:
                raise SchemaError(f"bad choice entry {c!r}", line)
    else:
        raise SchemaError("choices must be a list or object", line)
    out = []
    for label, text in items:
        if not isinstance(label, str) or not isinstance(text, str) or not label:
            raise SchemaError(f"bad choice entry {(label, text)!r}", line)
        out.append((label.strip().upper(), text))
    return tuple(out)


def load_problems(path) -> list[Problem]:
    problems = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc}", n) from exc
            if not isinstance(d, dict):
                raise SchemaError("expected an object", n)
            missing = {"id", "question", "answer", "answer_type"} - d.keys()
            if missing:
                raise SchemaError(f"missing fields {sorted(missing)}", n)
            try:
                atype = AnswerType(d["answer_type"])
            except ValueError:
                raise SchemaError(f"unknown answer_type {d['answer_type']!r}", n) from None
            choices = _parse_choices(d.get("choices"), n)
            if (atype is AnswerType.MULTIPLE_CHOICE) != bool(choices):
                raise SchemaError("choices are required for multiple_choice and only there", n)
            pid = str(d["id"])
            if pid in seen:
                raise DuplicateId(f"duplicate id {pid!r}", n)
            seen.add(pid)
            gold = str(d["answer"])
            try:
                normalize_answer(gold, atype)
            except UnparseableAnswer as exc:
                raise SchemaError(f"gold answer not normalizable: {exc}", n) from None
            problems.append(Problem(pid, str(d["question"]), gold, atype, choices))
    return problems


# --------------------------------------------------------------- answers

_CUE = re.compile(r"answer\s+is|answer\s*:", re.I)
_NUM = re.compile(r"(?<![\d.])-?\$?\d(?:[\d,]*\d)?(?:\.\d+)?")
_MC_PAREN = re.compile(r"\(([A-F])\)")
_MC_BARE = re.compile(r"(?<![A-Za-z])([A-F])(?![A-Za-z])")
_YESNO = re.compile(r"\b(yes|no)\b", re.I)


def _cue_region(text: str) -> Optional[str]:
    cues = list(_CUE.finditer(text))
    if cues:
        return text[cues[-1].end():].split("\n", 1)[0]
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if lines and "=" in lines[-1]:
        return lines[-1].rsplit("=", 1)[1]
    return None


def extract_answer(raw_text: str, answer_type, choices=None) -> Optional[str]:
    """Pull the final answer out of a generation; None when nothing matches."""
    atype = AnswerType(answer_type)
    region = _cue_region(raw_text)
    if atype is AnswerType.STRING:
        if region is None:
            return None
        s = region.strip().strip("\"'").rstrip(".").strip().strip("\"'")
        return s or None

    scopes = [region, raw_text] if region is not None else [raw_text]
    for scope in scopes:
        if atype is AnswerType.NUMERIC:
            nums = _NUM.findall(scope)
            if nums:
                return nums[-1]
        elif atype is AnswerType.YES_NO:
            hits = _YESNO.findall(scope)
            if hits:
                return hits[-1]
        else:
            hits = _MC_PAREN.findall(scope) or _MC_BARE.findall(scope)
            if hits:
                return hits[-1]
            if choices:
                low = scope.lower()
                found = [(low.rfind(t.lower()), lab) for lab, t in choices if t and t.lower() in low]
                if found:
                    return max(found)[1]
    return None


def normalize_answer(raw: str, answer_type) -> str:
    atype = AnswerType(answer_type)
    if raw is None:
        raise UnparseableAnswer("no answer")
    s = str(raw).strip()
    if atype is AnswerType.NUMERIC:
        t = s.replace("$", "").replace(",", "").replace("%", "").strip().rstrip(".")
        try:
            d = Decimal(t)
        except InvalidOperation:
            raise UnparseableAnswer(f"not a number: {raw!r}") from None
        if not d.is_finite():
            raise UnparseableAnswer(f"not a finite number: {raw!r}")
        out = format(d.normalize(), "f")
        return "0" if out in ("-0", "0") else out
    if atype is AnswerType.MULTIPLE_CHOICE:
        m = re.match(r"^\(?([A-Za-z])\)?(?:[\s.:)]|$)", s)
        if not m:
            raise UnparseableAnswer(f"not a choice label: {raw!r}")
        return m.group(1).upper()
    if atype is AnswerType.YES_NO:
        t = s.lower().strip(" .!?\"'")
        if t not in ("yes", "no"):
            raise UnparseableAnswer(f"not yes/no: {raw!r}")
        return t
    return " ".join(s.lower().split())


def canonical_answer(raw: Optional[str], answer_type) -> Optional[str]:
    try:
        return normalize_answer(raw, answer_type)
    except UnparseableAnswer:
        return None


def accuracy(predictions: Sequence[Optional[str]], golds: Sequence[str]) -> float:
    if len(predictions) != len(golds):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(golds)} golds")
    if not golds:
        raise EmptySet("accuracy of an empty set")
    hits = sum(1 for p, g in zip(predictions, golds) if p is not None and p == g)
    return 100.0 * hits / len(golds)


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    if len(xs) != len(ys):
        raise LengthMismatch(f"{len(xs)} vs {len(ys)} values")
    if len(xs) < 2:
        raise LengthMismatch("need at least two pairs")
    n = len(xs)
    mx = math.fsum(xs) / n
    my = math.fsum(ys) / n
    dx = [x - mx for x in xs]
    dy = [y - my for y in ys]
    sxx = math.fsum(d * d for d in dx)
    syy = math.fsum(d * d for d in dy)
    if sxx == 0 or syy == 0:
        raise ConstantInput("pearson correlation of a constant series")
    r = math.fsum(a * b for a, b in zip(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


# ---------------------------------------------------------------- config


@dataclass
class VoteConfig:
    mode: str = "weighted"
    k: int = 5

    def __post_init__(self):
        if self.mode not in VOTE_MODES:
            raise ValueError(f"unknown vote mode {self.mode!r}")
        if self.k < 1:
            raise ValueError("vote pool size must be >= 1")


@dataclass
class ExperimentConfig:
    dataset_path: str
    backend: BackendConfig
    n_chains: int = 40
    verifiers: tuple = tuple(k.value for k in ALL_KINDS)
    n_samples: int = 5
    weights: dict = field(default_factory=dict)
    selection: str = "top_verifier"
    vote: Optional[VoteConfig] = None
    prefix: PrefixSpec = field(default_factory=PrefixSpec)
    trials: int = 20
    seed: int = 0
    math_verifier: Optional[bool] = None  # None: on for numeric problems only
    tolerance: ToleranceSpec = field(default_factory=ToleranceSpec)
    temperature: float = 0.7
    max_tokens: int = 512
    verifier_max_tokens: int = 128
    perplexity_norm: str = "reciprocal"  # reciprocal | rank
    cache_dir: Optional[str] = None
    jobs: int = 1
    prompt_dir: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.backend, dict):
            self.backend = BackendConfig.from_dict(self.backend)
        if isinstance(self.vote, dict):
            self.vote = VoteConfig(**self.vote)
        if isinstance(self.prefix, dict):
            self.prefix = PrefixSpec(**self.prefix)
        if isinstance(self.tolerance, dict):
            self.tolerance = ToleranceSpec(**self.tolerance)
        self.verifiers = tuple(VerifierKind(v).value for v in self.verifiers)
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if self.selection not in SELECTION_MODES:
            raise ValueError(f"unknown selection mode {self.selection!r}")
        if self.vote is not None and self.vote.k > self.n_chains:
            raise ValueError("vote pool size k cannot exceed n_chains")
        if self.trials < 1 or self.n_samples < 1:
            raise ValueError("trials and n_samples must be >= 1")
        if self.perplexity_norm not in ("reciprocal", "rank"):
            raise ValueError(f"unknown perplexity_norm {self.perplexity_norm!r}")
        make_weights(self.weights)

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "ExperimentConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if base_dir is not None:
            base = Path(base_dir)
            for key in ("dataset_path", "cache_dir", "prompt_dir"):
                if d.get(key) and not Path(d[key]).is_absolute():
                    d[key] = str(base / d[key])
            b = dict(d.get("backend") or {})
            if b.get("script_path") and not Path(b["script_path"]).is_absolute():
                b["script_path"] = str(base / b["script_path"])
            d["backend"] = b
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")), base_dir=path.parent)

    def to_dict(self) -> dict:
        return {
            "dataset_path": str(self.dataset_path),
            "backend": self.backend.to_dict(),
            "n_chains": self.n_chains,
            "verifiers": list(self.verifiers),
            "n_samples": self.n_samples,
            "weights": {k.value: v for k, v in make_weights(self.weights).items()},
            "selection": self.selection,
            "vote": {"mode": self.vote.mode, "k": self.vote.k} if self.vote else None,
            "prefix": self.prefix.to_dict(),
            "trials": self.trials,
            "seed": self.seed,
            "math_verifier": self.math_verifier,
            "tolerance": self.tolerance.to_dict(),
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "verifier_max_tokens": self.verifier_max_tokens,
            "perplexity_norm": self.perplexity_norm,
        }


def derive_seed(*parts) -> int:
    return int(hashlib.sha256("|".join(map(str, parts)).encode()).hexdigest()[:16], 16)


# --------------------------------------------------------------- pipeline


def generation_prompt(problem: Problem) -> str:
    lines = [f"Q: {problem.question}"]
    if problem.choices:
        lines.append("Answer Choices: " + " ".join(f"({lab}) {text}" for lab, text in problem.choices))
    lines.append(f"A: {SCAFFOLD}")
    return "\n".join(lines)


def open_backend(config: ExperimentConfig, cache_dir=None):
    inner = make_backend(config.backend)
    cache_dir = cache_dir or config.cache_dir
    if cache_dir:
        return CachedBackend(inner, ResponseCache(cache_dir))
    return inner


@dataclass
class ExperimentData:
    problems: list[Problem]
    chains: dict[str, list[ReasoningChain]]
    scores: dict[str, list[StepScore]] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)
    chain_failures: int = 0
    provenance: dict = field(default_factory=dict)

    def problem_chains(self, pid: str) -> list[ReasoningChain]:
        return self.chains.get(pid, [])


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def generate_problem_chains(backend, problem: Problem, config: ExperimentConfig):
    """Sample ``n_chains`` generations for one problem; returns (chains, n_failed)."""
    prompt = generation_prompt(problem)
    chains, failed = [], 0
    for j in range(config.n_chains):
        req = CompletionRequest(prompt, config.temperature, config.max_tokens, True, None, f"chain{j}")
        comp = backend.complete(req)
        answer = extract_answer(comp.text, problem.answer_type, problem.choices)
        try:
            chain = make_chain(f"{problem.id}/{j}", problem.id, comp.text, comp.tokens, answer)
        except EmptyChain:
            log.warning("problem %s chain %d: empty generation", problem.id, j)
            failed += 1
            continue
        chains.append(chain)
    return chains, failed


def generate(config: ExperimentConfig, problems: Sequence[Problem], backend, jobs: int = 1) -> ExperimentData:
    def one(p):
        try:
            return generate_problem_chains(backend, p, config), None
        except BackendError as exc:
            return ([], 0), f"{type(exc).__name__}: {exc}"

    data = ExperimentData(list(problems), {})
    for p, ((chains, failed), err) in zip(problems, _map(one, problems, jobs)):
        data.chain_failures += failed
        if err:
            log.warning("problem %s: generation failed: %s", p.id, err)
            data.failures[p.id] = err
        elif not chains:
            data.failures[p.id] = "no usable chains"
        data.chains[p.id] = chains
    return data


def suites_for(config: ExperimentConfig, backend):
    """(suite with math, suite without math); chosen per problem."""
    catalog = PromptCatalog.load(config.prompt_dir) if config.prompt_dir else None
    params = SamplingParams(config.temperature, config.verifier_max_tokens)
    kinds = tuple(VerifierKind(k) for k in config.verifiers)
    common = dict(n_samples=config.n_samples, tolerance=config.tolerance, params=params, catalog=catalog)
    with_math = VerifierSuite(backend, kinds, **common)
    without = VerifierSuite(backend, tuple(k for k in kinds if k is not VerifierKind.MATH_ACCURACY), **common)
    return with_math, without


def math_enabled(config: ExperimentConfig, problem: Problem) -> bool:
    if config.math_verifier is None:
        return problem.answer_type is AnswerType.NUMERIC
    return config.math_verifier


def verify(config: ExperimentConfig, data: ExperimentData, backend, jobs: int = 1, prefix: Optional[PrefixSpec] = None) -> ExperimentData:
    prefix = prefix or config.prefix
    with_math, without = suites_for(config, backend)

    def one(p):
        suite = with_math if math_enabled(config, p) else without
        out = {}
        try:
            for chain in data.problem_chains(p.id):
                pre = chain_prefix(chain, prefix)
                out[chain.chain_id] = [] if pre.unscored else suite.score_chain(p.question, pre)
        except BackendError as exc:
            return {}, f"{type(exc).__name__}: {exc}"
        return out, None

    for p, (scores, err) in zip(data.problems, _map(one, data.problems, jobs)):
        if err:
            log.warning("problem %s: verification failed: %s", p.id, err)
            data.failures.setdefault(p.id, err)
            continue
        data.scores.update(scores)
    data.provenance["prompt_catalog"] = with_math.catalog.digest
    return data


def prepare(config: ExperimentConfig, backend=None, jobs: Optional[int] = None, verifiers: bool = True) -> ExperimentData:
    backend = backend or open_backend(config)
    jobs = jobs or config.jobs
    problems = load_problems(config.dataset_path)
    data = generate(config, problems, backend, jobs)
    if verifiers and config.verifiers:
        verify(config, data, backend, jobs)
    data.provenance.update(provenance(backend))
    return data


def provenance(backend) -> dict:
    prov = {"backend_id": backend.backend_id, "backend_calls": getattr(backend, "calls", None)}
    if isinstance(backend, CachedBackend):
        prov["cache"] = backend.stats()
    return prov


# ----------------------------------------------------------------- trials


@dataclass
class ModeResult:
    mode: str
    verifiers: tuple
    k: int
    accuracies: list[float]
    n_problems: int
    failures: int
    records: list[dict] = field(default_factory=list)
    prefix: str = "all"

    @property
    def accuracy_mean(self) -> float:
        return math.fsum(self.accuracies) / len(self.accuracies)

    @property
    def accuracy_std(self) -> float:
        m = self.accuracy_mean
        return math.sqrt(math.fsum((a - m) ** 2 for a in self.accuracies) / len(self.accuracies))

    def summary(self) -> str:
        return f"{self.mode}: accuracy {self.accuracy_mean:.2f}±{self.accuracy_std:.2f} over {len(self.accuracies)} trials"

    def csv_row(self) -> dict:
        return {
            "mode": self.mode,
            "verifiers": "+".join(self.verifiers),
            "k": self.k,
            "prefix": self.prefix,
            "accuracy_mean": f"{self.accuracy_mean:.6f}",
            "accuracy_std": f"{self.accuracy_std:.6f}",
            "n_problems": self.n_problems,
            "failures": self.failures,
        }

    def to_dict(self) -> dict:
        d = self.csv_row()
        d.update(
            verifiers=list(self.verifiers),
            accuracy_mean=self.accuracy_mean,
            accuracy_std=self.accuracy_std,
            accuracies=self.accuracies,
            records=self.records,
        )
        return d


@dataclass
class Report:
    rows: list[ModeResult]
    config: dict
    provenance: dict

    def to_dict(self) -> dict:
        return {"rows": [r.to_dict() for r in self.rows], "config": self.config, "provenance": self.provenance}

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def write_csv(self, path) -> None:
        write_csv(self.rows, path)


CSV_FIELDS = ["mode", "verifiers", "k", "prefix", "accuracy_mean", "accuracy_std", "n_problems", "failures"]


def write_csv(rows: Sequence[ModeResult], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r.csv_row())


def bootstrap_scores(scores: Sequence[StepScore], rng: random.Random) -> list[StepScore]:
    """Resample each step's verdict list with replacement (same size)."""
    out = []
    for s in scores:
        if len(s.verdicts) > 1:
            vs = tuple(rng.choice(s.verdicts) for _ in s.verdicts)
            out.append(replace(s, score=sum(v.value for v in vs) / len(vs), verdicts=vs))
        else:
            out.append(s)
    return out


def _chain_scores(chains, scores_by_chain, kinds, weights) -> list[ChainScore]:
    return [score_chain(c.chain_id, scores_by_chain.get(c.chain_id, []), weights, kinds) for c in chains]


def _problem_scores(data: ExperimentData, chains, config: ExperimentConfig):
    by_chain = {c.chain_id: data.scores.get(c.chain_id, []) for c in chains}
    if config.perplexity_norm == "rank":
        by_chain = rank_normalize_perplexity(by_chain)
    return by_chain


def _pick(
    mode: str,
    problem: Problem,
    chains: list[ReasoningChain],
    by_chain: Mapping[str, list[StepScore]],
    kinds,
    weights,
    vote: Optional[VoteConfig],
    seed: int,
    trial: int,
    resample: bool,
):
    """Returns (selected chain ids, predicted canonical answer)."""
    answers = {c.chain_id: canonical_answer(c.extracted_answer, problem.answer_type) for c in chains}
    ids = [c.chain_id for c in chains]
    cscores = None
    if mode == "top_verifier" or (vote is not None and vote.mode == "weighted"):
        if resample:
            rng = random.Random(derive_seed(seed, trial, problem.id, "bootstrap"))
            by_chain = {cid: bootstrap_scores(by_chain.get(cid, []), rng) for cid in ids}
        cscores = _chain_scores(chains, by_chain, kinds, weights)

    k = vote.k if vote else 1
    rseed = derive_seed(seed, trial, problem.id)
    if mode == "random":
        pool = sample_pool(ids, k, rseed) if vote else [select_random(ids, rseed)]
    elif mode == "low_ppl":
        pool = rank_low_ppl(chains)[:k]
    else:
        pool = rank_top(cscores)[:k]

    if vote is None:
        return pool, answers[pool[0]]
    if vote.mode == "majority":
        voted = [answers[c] for c in pool if answers[c] is not None]
        return pool, majority_vote(voted).winner if voted else None
    agg = {cs.chain_id: cs.aggregate for cs in cscores}
    entries = [(answers[c], agg[c]) for c in pool if answers[c] is not None]
    return pool, weighted_vote(entries).winner if entries else None


def _evaluate_mode(config: ExperimentConfig, data: ExperimentData, mode: str, kinds) -> ModeResult:
    weights = make_weights(config.weights)
    kinds = tuple(VerifierKind(k) for k in kinds)
    # no verifier signal reduces to random selection
    effective = "random" if mode == "top_verifier" and not kinds else mode
    vote = config.vote
    golds = [normalize_answer(p.gold_answer, p.answer_type) for p in data.problems]
    per_problem = []
    for p in data.problems:
        chains = data.problem_chains(p.id)
        if p.id in data.failures or not chains:
            per_problem.append(None)
            continue
        per_problem.append((chains, _problem_scores(data, chains, config)))

    accuracies, records = [], []
    for t in range(1, config.trials + 1):
        preds = []
        for p, gold, item in zip(data.problems, golds, per_problem):
            if item is None:
                preds.append(None)
                if t == 1:
                    records.append({"problem_id": p.id, "selected": None, "answer": None, "gold": gold,
                                    "correct": False, "failure": data.failures.get(p.id, "no chains")})
                continue
            chains, by_chain = item
            pool, pred = _pick(effective, p, chains, by_chain, kinds, weights, vote, config.seed, t, resample=True)
            preds.append(pred)
            if t == 1:
                if effective != "random":
                    # per-problem records use the un-resampled verifier scores
                    pool, pred = _pick(effective, p, chains, by_chain, kinds, weights, vote, config.seed, t, resample=False)
                records.append({"problem_id": p.id, "selected": pool if vote else pool[0], "answer": pred,
                                "gold": gold, "correct": pred is not None and pred == gold})
        accuracies.append(accuracy(preds, golds))

    label = effective if vote is None else f"{effective}+{vote.mode}_vote"
    used = tuple(k.value for k in kinds) if mode == "top_verifier" or (vote and vote.mode == "weighted") else ()
    return ModeResult(label, used, vote.k if vote else 1, accuracies, len(data.problems), len(data.failures),
                      records, config.prefix.label())


def run_trials(config: ExperimentConfig, data: Optional[ExperimentData] = None, modes: Optional[Sequence[str]] = None,
               backend=None) -> Report:
    """Accuracy mean and population std over ``config.trials`` trials per mode.

    random re-draws its choice each trial; top_verifier bootstrap-resamples
    every step's verdicts; low_ppl is deterministic.
    """
    if data is None:
        data = prepare(config, backend)
    modes = list(modes or [config.selection])
    for m in modes:
        if m not in SELECTION_MODES:
            raise ValueError(f"unknown mode {m!r}")
    rows = [_evaluate_mode(config, data, m, config.verifiers) for m in modes]
    return Report(rows, config.to_dict(), dict(data.provenance))


def ablate(config: ExperimentConfig, subsets: Sequence[Sequence[str]], data: Optional[ExperimentData] = None,
           backend=None) -> Report:
    """One top_verifier row per verifier subset, all aggregated from the same step scores."""
    subsets = [tuple(VerifierKind(k) for k in s) for s in subsets]
    if data is None:
        union = {k.value for s in subsets for k in s} | set(config.verifiers)
        full = replace(config, verifiers=tuple(k.value for k in ALL_KINDS if k.value in union))
        data = prepare(full, backend)
    rows = [_evaluate_mode(config, data, "top_verifier", s) for s in subsets]
    return Report(rows, config.to_dict(), dict(data.provenance))


# ------------------------------------------------------------------- io


def write_scores(path, scores: Mapping[str, Sequence[StepScore]]) -> None:
    write_jsonl(path, (s.to_dict(cid) for cid, ss in scores.items() for s in ss))


def read_scores(path) -> dict[str, list[StepScore]]:
    out: dict[str, list[StepScore]] = {}
    for d in read_jsonl(path):
        out.setdefault(d["chain_id"], []).append(StepScore.from_dict(d))
    return out


def write_chain_scores(path, chain_scores: Sequence[ChainScore]) -> None:
    write_jsonl(path, (cs.to_dict() for cs in chain_scores))
