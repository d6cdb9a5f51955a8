from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import pytest

from chainverify.backend import Completion
from chainverify.core import split_steps
from chainverify.harness import generation_prompt
from chainverify.core import AnswerType, Problem
from chainverify.verifiers import VerifierKind, default_catalog

YES = ["Yes, the solution is relevant.", "yes", "Yes it is relevant", "yes, the solution is relevant", "Yes."]
NO = ["No, the solution is not relevant.", "no", "The solution is not relevant.", "no, it is off topic", "No."]
CONSISTENT = ["consistent with the previous steps.", "not contradicting any information",
              "consistent.", "consistent with the given information", "not contradicting the problem"]
CONTRADICT = ["contradicting the previous steps.", "contradicting the information given", "contradicting.",
              "contradicting step 1", "contradicting the question"]

CLEAN_LP = -0.3
DEFECT_LP = -0.1


def tokenize_text(text: str, lp: float) -> list[list]:
    return [[t, lp] for t in re.findall(r"\S+|\s+", text)]


class ScriptBuilder:
    """Collects scripted responses keyed by the exact prompts the library renders."""

    def __init__(self):
        self.catalog = default_catalog()
        self.entries: dict[str, list[dict]] = {}

    def add(self, prompt: str, samples: list[dict]):
        if prompt in self.entries:
            assert self.entries[prompt] == samples, f"conflicting script for {prompt[:60]!r}"
            return
        self.entries[prompt] = samples

    def add_verdicts(self, kind: VerifierKind, texts: list[str], question="", previous=(), step=""):
        prompt = self.catalog.render(kind, question, list(previous), step)
        self.add(prompt, [{"text": t} for t in texts])

    def write(self, path) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as f:
            for key, samples in self.entries.items():
                f.write(json.dumps({"prompt_key": key, "samples": samples}, sort_keys=True) + "\n")
        return path


@dataclass
class Corpus:
    problems_path: Path
    script_path: Path
    problems: list
    clean_index: dict  # problem id -> index of the defect-free chain
    defects: dict = field(default_factory=dict)  # chain id -> defect kind


DEFECTS = ("irrelevant", "contradiction", "arith_early", "arith_late")


def _chain_lines(a, b, d, defect):
    c, e = a + b, a + b - d
    s0 = f"Tom starts with {a} apples and buys {b} more."
    s1 = f"Now he has {a}+{b}=<<{a}+{b}={c}>>{c} apples."
    s2 = f"He gives away {d}, so he keeps {c}-{d}=<<{c}-{d}={e}>>{e} apples."
    ans = e
    lines = [s0, s1, s2]
    if defect == "irrelevant":
        lines.insert(1, f"His neighbour Mr. Doe spent ${a + 7} on tickets.")
        ans = e + 1
    elif defect == "contradiction":
        lines[1] = f"Since he began with {a + 2} apples, he now has {c + 2} apples."
        lines[2] = f"He gives away {d}, so he keeps {c + 2}-{d}=<<{c + 2}-{d}={e + 2}>>{e + 2} apples."
        ans = e + 2
    elif defect == "arith_early":
        lines[1] = f"Now he has {a}+{b}=<<{a}+{b}={c + 3}>>{c + 3} apples."
        lines[2] = f"He gives away {d}, so he keeps {c + 3}-{d}=<<{c + 3}-{d}={e + 3}>>{e + 3} apples."
        ans = e + 3
    elif defect == "arith_late":
        lines[2] = f"He gives away {d}, so he keeps {c}-{d}=<<{c}-{d}={e - 4}>>{e - 4} apples."
        ans = e - 4
    lines.append(f"So the answer is {ans}.")
    return lines, ans


def build_corpus(tmp: Path, n_problems: int = 30, chains: int = 5) -> Corpus:
    """Numeric word problems, each with one clean chain and planted defects in the rest.

    Relevance and consistency responses are scripted per rendered prompt;
    arithmetic is written with ``<<..>>`` markers so the math verifier is
    deterministic. Defect chains get *lower* perplexity than the clean chain
    so perplexity alone prefers them.
    """
    sb = ScriptBuilder()
    problems, clean_index, defects = [], {}, {}
    for i in range(n_problems):
        a, b, d = 10 + i, 3 + i % 7, 2 + i % 5
        pid = f"p{i:02d}"
        q = f"Tom has {a} apples and buys {b} more. He gives away {d}. How many apples does he keep?"
        prob = Problem(pid, q, str(a + b - d), AnswerType.NUMERIC)
        problems.append(prob)
        clean = i % chains
        clean_index[pid] = clean
        kinds = iter(DEFECTS * chains)
        samples = []
        for j in range(chains):
            defect = None if j == clean else next(kinds)
            if defect:
                defects[f"{pid}/{j}"] = defect
            lines, _ = _chain_lines(a, b, d, defect)
            text = "\n".join(lines) + "\n"
            samples.append({"text": text, "tokens": tokenize_text(text, DEFECT_LP if defect else CLEAN_LP)})
            steps = [s.text for s in split_steps(text)]
            for k, step in enumerate(steps):
                prev = steps[:k]
                irrelevant = defect == "irrelevant" and step.startswith("His neighbour")
                sb.add_verdicts(VerifierKind.RELEVANCE, NO if irrelevant else YES, q, prev, step)
                contra = defect == "contradiction" and step.startswith("Since he began")
                sb.add_verdicts(VerifierKind.CONSISTENCY, CONTRADICT if contra else CONSISTENT, "", prev, step)
                if "<<" not in step:
                    sb.add_verdicts(VerifierKind.MATH_ACCURACY, ["\n"], step=step)
        sb.add(generation_prompt(prob), samples)

    problems_path = tmp / "problems.jsonl"
    with open(problems_path, "w", encoding="utf-8") as f:
        for p in problems:
            f.write(json.dumps({"id": p.id, "question": p.question, "answer": p.gold_answer,
                                "answer_type": "numeric"}) + "\n")
    script_path = sb.write(tmp / "script.jsonl")
    return Corpus(problems_path, script_path, problems, clean_index, defects)


def write_config(tmp: Path, corpus: Corpus, **overrides) -> Path:
    cfg = {
        "dataset_path": str(corpus.problems_path),
        "backend": {"kind": "scripted", "script_path": str(corpus.script_path)},
        "n_chains": 5,
        "n_samples": 5,
        "trials": 5,
        "seed": 3,
        "cache_dir": str(tmp / "cache"),
    }
    cfg.update(overrides)
    path = tmp / "config.json"
    path.write_text(json.dumps(cfg, indent=2), encoding="utf-8")
    return path


@pytest.fixture
def corpus(tmp_path) -> Corpus:
    return build_corpus(tmp_path)


class CountingBackend:
    """Answers every verifier prompt positively and counts calls."""

    backend_id = "counting"

    def __init__(self, reply="Yes, the solution is relevant and consistent with the previous steps."):
        self.reply = reply
        self.calls = 0
        self.requests = []

    def complete(self, request):
        self.calls += 1
        self.requests.append(request)
        text = "[]" if request.stop == ("```",) else self.reply
        return Completion(text, None, self.backend_id)


# ------------------------------------------------------- acceptance report

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    marker = getattr(report, "_criterion", None)
    if marker is None:
        return
    ok = report.passed if report.when == "call" else not report.failed
    prev = _CRITERIA.get(marker, True)
    _CRITERIA[marker] = prev and ok


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    m = item.get_closest_marker("criterion")
    if m is not None:
        outcome.get_result()._criterion = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for (n, title), ok in sorted(_CRITERIA.items()):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}")
