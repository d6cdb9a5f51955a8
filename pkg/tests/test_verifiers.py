from __future__ import annotations

import json
import math
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from chainverify.backend import Completion, ScriptedBackend
from chainverify.core import make_chain
from chainverify.errors import EmptyTokenList, EmptyVerdicts, InvalidPerplexity, MissingLogprobs
from chainverify.mathcheck import ToleranceSpec
from chainverify.verifiers import (
    ALL_KINDS,
    PromptCatalog,
    StepScore,
    Verdict,
    VerifierKind,
    VerifierSuite,
    default_catalog,
    expectation_score,
    parse_verdict,
    perplexity_score,
    step_perplexity,
    verify_consistency,
    verify_math,
    verify_relevance,
)

from conftest import CountingBackend

R, C, M, P = VerifierKind.RELEVANCE, VerifierKind.CONSISTENCY, VerifierKind.MATH_ACCURACY, VerifierKind.PERPLEXITY


class Queue:
    """Returns queued texts in order; records prompts."""

    backend_id = "queue"

    def __init__(self, texts):
        self.texts = list(texts)
        self.prompts = []
        self.calls = 0

    def complete(self, request):
        self.calls += 1
        self.prompts.append(request)
        return Completion(self.texts.pop(0), None, self.backend_id)


# ------------------------------------------------------------ parse_verdict

@pytest.mark.parametrize(
    "kind,text,value,ok",
    [
        (R, "Yes, the solution is relevant because it computes the cost.", 1, True),
        (R, "yes, the solution is relevant", 1, True),
        (R, "No, step 2 failed.", 0, True),
        (R, "The solution is not relevant to Mr. Benson.", 0, True),
        (R, "This step is irrelevant.", 0, True),
        (R, "The solution is relevant.", 1, True),
        (R, "The weather is nice", 0, False),
        (R, "", 0, False),
        (C, "consistent with the previous steps", 1, True),
        (C, "contradicting the previous steps", 0, True),
        (C, "not contradicting any information", 1, True),
        (C, "NOT CONTRADICTING any information", 1, True),
        (C, "inconsistent with step 1", 0, True),
        (C, " it does not contradict anything", 1, True),
        (C, "purple", 0, False),
    ],
)
def test_parse_verdict(kind, text, value, ok):
    v = parse_verdict(kind, text)
    assert (v.value, v.parse_ok) == (value, ok)
    assert v.raw_output == text


PAIRS = [
    (R, "the solution is relevant", "the solution is not relevant"),
    (R, "yes", "no"),
    (C, "contradicting the previous steps", "not contradicting the previous steps"),
    (C, "consistent", "not consistent"),
    (C, "inconsistent", "not inconsistent"),
]


@pytest.mark.parametrize("kind,pos,neg", PAIRS)
def test_negation_flips(kind, pos, neg):
    assert parse_verdict(kind, pos).value != parse_verdict(kind, neg).value


@given(st.text(max_size=60), st.sampled_from([R, C]))
def test_parse_verdict_total_and_deterministic(text, kind):
    a, b = parse_verdict(kind, text), parse_verdict(kind, text)
    assert a == b and a.value in (0, 1)


def test_parse_verdict_rejects_math_kind():
    with pytest.raises(ValueError):
        parse_verdict(M, "yes")


# --------------------------------------------------------------- perplexity

def test_step_perplexity_examples():
    assert step_perplexity([math.log(0.5)] * 4) == 2.0
    assert step_perplexity([0.0]) == 1.0
    assert step_perplexity([math.log(0.25), math.log(1.0)]) == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(EmptyTokenList):
        step_perplexity([])


def test_perplexity_score_examples():
    assert perplexity_score(1.0) == 1.0
    assert perplexity_score(2.0) == 0.5
    assert perplexity_score(100) == 0.01
    with pytest.raises(InvalidPerplexity):
        perplexity_score(0.5)


@given(st.lists(st.floats(-20, 0), min_size=1, max_size=30))
def test_perplexity_composition(lps):
    ppl = step_perplexity(lps)
    assert ppl >= 1
    assert perplexity_score(ppl) == pytest.approx(math.exp(sum(lps) / len(lps)), rel=1e-9)


def test_expectation_score():
    vs = [Verdict(R, v) for v in (1, 1, 0, 1, 0)]
    assert expectation_score(vs) == 0.6
    assert expectation_score([Verdict(R, 0)] * 3) == 0.0
    with pytest.raises(EmptyVerdicts):
        expectation_score([])
    with pytest.raises(ValueError):
        expectation_score([Verdict(R, 1), Verdict(C, 1)])


def test_expectation_converges_on_scripted_backend(tmp_path):
    rng = random.Random(17)
    samples = [{"text": "yes" if rng.random() < 0.7 else "no"} for _ in range(1000)]
    prompt = default_catalog().render(R, "Q", [], "step")
    path = tmp_path / "s.jsonl"
    path.write_text(json.dumps({"prompt_key": prompt, "samples": samples}) + "\n", encoding="utf-8")
    score = verify_relevance(ScriptedBackend.from_file(path), "Q", [], "step", n_samples=1000)
    assert abs(score.score - 0.7) <= 0.05
    assert score.n_samples == 1000


# ------------------------------------------------------------ LLM verifiers

def test_relevance_all_yes_and_mixed():
    q = Queue(["yes, the solution is relevant"] * 5)
    assert verify_relevance(q, "Q", ["a"], "b").score == 1.0
    assert [r.seed_tag for r in q.prompts] == [f"relevance:s{i}" for i in range(5)]
    assert all(r.temperature == 0.7 for r in q.prompts)
    q = Queue(["yes", "yes", "no", "yes", "no"])
    s = verify_relevance(q, "Q", [], "b")
    assert s.score == 0.6 and s.n_samples == 5 and len(s.verdicts) == 5


def test_relevance_prompt_contents():
    q = Queue(["yes"])
    verify_relevance(q, "How much did Mr. Benson spend?", ["s1", "s2"], "s3", n_samples=1)
    p = q.prompts[0].prompt
    assert "### Problem: How much did Mr. Benson spend?" in p
    assert "### Draft solution: s1\ns2" in p
    assert "### Draft step: s3" in p
    assert "yes, the solution is relevant" in p


def test_irrelevant_step_scripted(tmp_path):
    question = "Mr. Benson bought 12 tickets at $40 each with a discount. How much did Mr. Benson spend?"
    step = "Mr. Doe spent $20 on snacks."
    prompt = default_catalog().render(R, question, ["He bought 12 tickets."], step)
    path = tmp_path / "s.jsonl"
    path.write_text(json.dumps({"prompt_key": prompt, "samples": [
        {"text": "No, calculating how much Mr. Doe spent is irrelevant to the question."}]}) + "\n")
    s = verify_relevance(ScriptedBackend.from_file(path), question, ["He bought 12 tickets."], step)
    assert s.score == 0.0


def test_contradiction_scripted(tmp_path):
    prev = ["Mr. Benson received a discount of $4 on each ticket over 10."]
    step = "He got a discount of $3 per ticket."
    prompt = default_catalog().render(C, "", prev, step)
    assert 'which is "He got a discount of $3 per ticket."' in prompt
    path = tmp_path / "s.jsonl"
    path.write_text(json.dumps({"prompt_key": prompt, "samples": [
        {"text": " contradicting the Previous Steps, which state a $4 discount."}]}) + "\n")
    s = verify_consistency(ScriptedBackend.from_file(path), prev, step)
    assert s.score == 0.0 and s.kind is C


def test_verifier_input_validation():
    with pytest.raises(ValueError):
        verify_relevance(Queue([]), "Q", [], "")
    with pytest.raises(ValueError):
        verify_consistency(Queue([]), [], "x", n_samples=0)


# ---------------------------------------------------------------- math

def test_math_marker_deterministic_no_calls():
    q = Queue([])
    a = verify_math(q, "he has $87-$32=<<87-32=40>>$40 left", n_samples=5)
    b = verify_math(q, "he has $87-$32=<<87-32=40>>$40 left", n_samples=5)
    assert a == b and a.score == 0.0 and a.n_samples == 1
    assert q.calls == 0
    assert verify_math(q, "<<12*40-(12-10)*40*0.05=476>>").score == 1.0


def test_math_llm_paths():
    good = '[{"lhs": "12*40-(12-10)*40*0.05", "op": "=", "rhs": "476"}]'
    q = Queue([good])
    s = verify_math(q, "total = 12*40-(12-10)*40*0.05 = 476", n_samples=1)
    assert s.score == 1.0 and q.prompts[0].stop == ("```",)
    assert q.prompts[0].prompt.rstrip().endswith("```json")
    q = Queue(["\n"])
    assert verify_math(q, "Mr. Benson bought 12 tickets", n_samples=1).score == 1.0
    q = Queue(['[{"lhs": "87-32", "op": "=", "rhs": "40"}]'])
    assert verify_math(q, "87 minus 32 is 40", n_samples=1).score == 0.0


def test_math_parse_failure_retries_once_then_vacuous():
    q = Queue(["garbage", '[{"lhs": "2+2", "op": "=", "rhs": "5"}]'])
    s = verify_math(q, "two and two is five", n_samples=1)
    assert s.score == 0.0 and q.calls == 2
    assert q.prompts[1].seed_tag.endswith(":retry")
    q = Queue(["garbage", "still garbage"])
    s = verify_math(q, "two and two is five", n_samples=1)
    assert s.score == 1.0 and s.verdicts[0].parse_ok is False


def test_math_tolerance_passed_through():
    q = Queue([])
    assert verify_math(q, "<<1/3=0.33>>").score == 1.0
    assert verify_math(q, "<<1/3=0.33>>", tolerance=ToleranceSpec(abs_tol=1e-6, rel_tol=1e-9)).score == 0.0


def test_catalog_defaults_and_exemplars():
    cat = PromptCatalog.load()
    assert cat.digest.startswith("sha256:")
    refs = [e for e in cat.exemplars if e.get("source") == "reference"]
    assert len(refs) == 1 and "87-32" in refs[0]["input"]
    assert all(e.get("source") in ("reference", "authored") for e in cat.exemplars)
    p = cat.render(M, current_step="X")
    assert "return the result in JSON format" in p.lower() or "json" in p.lower()
    assert "Input:\nX\n\nOutput:" in p


def test_catalog_from_directory(tmp_path):
    for name in PromptCatalog.FILES.values():
        (tmp_path / name).write_text("T {problem}|{previous_steps}|{current_step}\n")
    cat = PromptCatalog.load(tmp_path)
    assert cat.render(R, "q", ["a", "b"], "c") == "T q|a\nb|c"
    assert cat.digest != default_catalog().digest


# ------------------------------------------------------------------ suite

def test_suite_scores_every_step_in_canonical_order():
    chain = make_chain("c", "p", "a 1\nb 2", tokens=[("a", -0.5), (" 1", -0.5), ("\n", 0.0), ("b 2", -0.1)])
    be = CountingBackend()
    suite = VerifierSuite(be, kinds=("perplexity", "relevance"), n_samples=2)
    scores = suite.score_chain("Q", chain)
    assert [(s.step_index, s.kind) for s in scores] == [(0, R), (0, P), (1, R), (1, P)]
    assert be.calls == 4
    assert scores[1].score == pytest.approx(math.exp(-1 / 3))


def test_suite_perplexity_needs_logprobs():
    with pytest.raises(MissingLogprobs):
        VerifierSuite(CountingBackend(), kinds=ALL_KINDS).score_chain("Q", make_chain("c", "p", "x"))


def test_step_score_jsonl_shape():
    s = StepScore(2, R, 0.5, 2, (Verdict(R, 1, "yes"), Verdict(R, 0, "??", False)))
    d = s.to_dict("c1")
    assert d == {"chain_id": "c1", "step_index": 2, "kind": "relevance", "score": 0.5, "n_samples": 2,
                 "verdicts": [{"value": 1, "parse_ok": True}, {"value": 0, "parse_ok": False}]}
    back = StepScore.from_dict(d)
    assert back.score == 0.5 and [v.value for v in back.verdicts] == [1, 0]
