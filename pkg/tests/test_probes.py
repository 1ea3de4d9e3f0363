import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gapprobe.core import ContractViolation, ProblemRecord, prefix_length
from gapprobe.modelclient import BackendError, MockBackend, MockModelSpec
from gapprobe.modelclient.base import Backend
from gapprobe.probes import (
    TEMPLATES,
    EntropySeries,
    ProbeError,
    PscResult,
    SuffixTemplate,
    commit_entropy_ratio,
    continuation_budget,
    entropy_from_topk,
    entropy_series,
    extract_answer,
    register_template,
    run_atlt,
    run_batch,
    run_efa,
    run_psc,
    summarize_samples,
)
from gapprobe.core import normalize_answer

PROB = ProblemRecord("p1", "Problem p1: find the planted value please.\n", "-50")


def backend(**kw):
    spec = MockModelSpec(answer="-50", distractors=("50", "5", "0"), **kw)
    return MockBackend({PROB.prompt: spec}), spec


def prefix(spec, f):
    return "".join(f" t{i}" for i in range(prefix_length(spec.rollout_length, f)))


def test_psc_committed():
    b, spec = backend(commit_fraction=0.2)
    r = run_psc(b, PROB, prefix(spec, 0.5), 0.5)
    assert (r.psc_value, r.self_agreement, r.correct_count, r.n) == (1.0, 1.0, 8, 8)


def test_psc_uncommitted_three_distractors():
    b, spec = backend(commit_fraction=0.2)
    r = run_psc(b, PROB, prefix(spec, 0.1), 0.1)
    assert r.psc_value == 0.0
    assert r.self_agreement >= r.majority_count / r.n


def test_psc_arithmetic():
    answers = [normalize_answer("-50")] * 6 + [normalize_answer("1")] * 2
    r = summarize_samples(0.3, answers, "-50")
    assert r.psc_value == 0.75 and r.self_agreement == 0.75 and not r.tied
    assert PscResult.from_record(r.to_record()) == r


def test_psc_signal_modes():
    r = summarize_samples(0.3, [normalize_answer(a) for a in ["9"] * 7 + ["1"]], "1")
    assert r.signal("deployment") == 7 / 8
    assert r.signal("offline") == 1 / 8
    with pytest.raises(ContractViolation):
        r.signal("other")


class Failing(Backend):
    def _sample(self, request, sample_offset=0):
        raise BackendError("down")


def test_probe_errors_wrap_backend_failures():
    with pytest.raises(ProbeError):
        run_psc(Failing(), PROB, "", 0.1)
    with pytest.raises(ProbeError):
        run_efa(Failing(), PROB, "", 0.1)


def test_efa_gap():
    b, spec = backend(commit_fraction=0.2, forceable_fraction=0.4)
    early = run_efa(b, PROB, prefix(spec, 0.1), 0.1)
    late = run_efa(b, PROB, prefix(spec, 0.5), 0.5)
    assert not early.correct and late.correct
    assert late.raw_output == "-50"
    again = run_efa(b, PROB, prefix(spec, 0.1), 0.1)
    assert again == early


class Echo(Backend):
    def __init__(self, text):
        super().__init__()
        self.text = text
        self.prompts = []

    def _sample(self, request, sample_offset=0):
        from gapprobe.modelclient.base import GenerationResult, Usage

        self.prompts.append(request)
        return GenerationResult((self.text,), ((self.text,),), Usage(1, 1))


def test_efa_stop_rule_and_normalization():
    e = Echo("-50}")
    r = run_efa(e, PROB, "abc", 0.1)
    assert r.correct and r.answer.normalized == "-50"
    req = e.prompts[0]
    assert req.temperature == 0.0 and req.max_tokens == 64 and req.stop_sequences == ("}",)
    assert req.prompt.endswith("abc" + TEMPLATES["original"].text)


def test_efa_templates():
    assert set(TEMPLATES) >= {"original", "natural", "soft", "plain", "direct"}
    with pytest.raises(ContractViolation):
        run_efa(Echo("1"), PROB, "", 0.1, "missing-template")
    with pytest.raises(ContractViolation):
        register_template(SuffixTemplate("original", "x"))


def test_psc_budget():
    assert continuation_budget(100, 0.3) == 140
    assert continuation_budget(10, 0.9) == 2


def test_atlt():
    b, spec = backend(commit_fraction=0.2)
    r = run_atlt(b, PROB, prefix(spec, 0.5), ["-50"])
    assert r.mean_logprob == pytest.approx(math.log(0.99))
    assert r.mean_logprob == pytest.approx(-0.01005, abs=1e-5)


def test_atlt_mean_of_tokens():
    class Scorer(Backend):
        def score_tokens(self, prompt, target_tokens):
            return [math.log(0.5), math.log(0.25)]

    r = run_atlt(Scorer(), PROB, "", ["a", "b"])
    assert r.mean_logprob == pytest.approx(-1.0397, abs=1e-4)


def test_atlt_unsupported_marker():
    r = run_atlt(Echo("x"), PROB, "", ["-50"])
    assert r.status == "unsupported" and r.mean_logprob is None
    with pytest.raises(ContractViolation):
        run_atlt(Echo("x"), PROB, "", [])


@pytest.mark.parametrize(
    "text,ans",
    [
        ("work \\boxed{3} then \\boxed{-50}.", "-50"),
        ("nested \\boxed{\\sqrt{2}+1}", "\\sqrt{2}+1"),
        ("so the answer is 12.\nextra", "12"),
        ("The Answer is: 7", "7"),
        ("line one\n  last line 9  \n", "last line 9"),
        ("", ""),
    ],
)
def test_extract_answer(text, ans):
    assert extract_answer(text).normalized == ans


# -- entropy ------------------------------------------------------------------------


def test_entropy_examples():
    assert entropy_from_topk([1.0] + [0.0] * 19, 0.0) == 0.0
    assert entropy_from_topk([0.05] * 20, 0.0) == pytest.approx(math.log(20), abs=1e-12)
    direct = -(20 * 0.045 * math.log(0.045)) - 0.10 * math.log(0.10)
    assert entropy_from_topk([0.045] * 20, 0.10) == pytest.approx(direct, abs=1e-12)
    assert direct == pytest.approx(3.0213, abs=1e-4)
    assert entropy_from_topk([("a", 0.5), ("b", 0.5)]) == pytest.approx(math.log(2))


def test_entropy_contract():
    with pytest.raises(ContractViolation):
        entropy_from_topk([-0.1, 0.5])
    with pytest.raises(ContractViolation):
        entropy_from_topk([0.6, 0.6])


@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=20))
def test_entropy_uniform_is_max(weights):
    total = sum(weights)
    if total == 0:
        return
    p = [w / total for w in weights]
    assert entropy_from_topk(p) <= math.log(len(p)) + 1e-9


def test_entropy_series_and_ratio():
    from gapprobe.modelclient.base import TopK

    tops = [TopK((("a", math.log(0.5)), ("b", math.log(0.5))), 0.0)] * 4
    s = entropy_series(tops, start=3)
    assert s.positions == (3, 4, 5, 6)
    assert commit_entropy_ratio(s, 5) == pytest.approx(1.0)
    assert commit_entropy_ratio(s, 0) is None
    assert EntropySeries.from_record(s.to_record()) == s
    with pytest.raises(ContractViolation):
        EntropySeries((0.1,), (1, 2))


def test_run_batch_order_independent():
    import random
    import time

    def task(i):
        time.sleep(random.random() / 500)
        return i * i

    out = run_batch([(i, (lambda i=i: task(i))) for i in range(30)], parallelism=8)
    assert out == {i: i * i for i in range(30)}
    assert run_batch([("a", lambda: 1)], parallelism=1) == {"a": 1}


@pytest.mark.slow
def test_psc_unbiased_on_mock():
    """Mean PSC over many trials sits within 3 standard errors of p."""
    M = 10_000
    for p in (0.3, 0.7):
        b = MockBackend()
        prob = ProblemRecord(f"u{p}", f"Unbiasedness check {p}\n", "7")
        b.register(prob.prompt, MockModelSpec(
            answer="7", curve_kind="table", recoverability_curve=((0.05, p),), rollout_length=4,
            commit_fraction=0.5, forceable_fraction=0.5,
        ))
        vals = np.array([run_psc(b, prob, f" t{i}", 0.5, max_tokens=8).psc_value for i in range(M)])
        assert abs(vals.mean() - p) <= 3 * math.sqrt(p * (1 - p) / (8 * M))
