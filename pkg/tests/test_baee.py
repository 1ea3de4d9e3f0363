import ast
import inspect
import math
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

import gapprobe.baee as baee_mod
from gapprobe.baee import (
    BaeeOutcome,
    BaeePolicy,
    ProblemResults,
    cost_report,
    guarantee,
    run_baee_adaptive,
    run_baee_all,
    run_efa_oracle,
    run_naive_efa,
    run_sc_baselines,
    simulate,
    strategy_rows,
)
from gapprobe.core import DEFAULT_GRID, ContractViolation, Rollout, normalize_answer
from gapprobe.modelclient.mock import build_population
from gapprobe.probes import EfaResult

from builders import psc_from_answers, psc_from_counts, record, rollout_for


def population(n=5, **kw):
    probs, backend = build_population(n, **kw)
    return probs, backend, [rollout_for(backend, p) for p in probs]


def test_policy_validation():
    with pytest.raises(ContractViolation):
        BaeePolicy(theta=0.7)
    with pytest.raises(ContractViolation):
        BaeePolicy(theta=0.0)
    with pytest.raises(ContractViolation):
        BaeePolicy(mode="sometimes")
    BaeePolicy(theta=0.625)


def test_outcome_invariants():
    a = normalize_answer("1")
    with pytest.raises(ContractViolation):
        BaeeOutcome("p", "s", True, None, a, True, 9, 10, 100)
    with pytest.raises(ContractViolation):
        BaeeOutcome("p", "s", False, None, a, True, 0, 100, 100)
    with pytest.raises(ContractViolation):
        BaeeOutcome("p", "s", False, None, a, True, 1, 101, 100)
    o = BaeeOutcome("p", "s", True, 0.3, a, True, 25, 30, 100, probe_tokens=7)
    assert BaeeOutcome.from_record(o.to_record()) == o


def test_adaptive_commit_at_first_checkpoint():
    probs, b, rolls = population(commit_fraction=0.1, forceable_fraction=0.4)
    pol = BaeePolicy(theta=1.0)
    for p, r in zip(probs, rolls):
        o = run_baee_adaptive(b, p, r, pol)
        assert (o.triggered, o.trigger_fraction, o.api_calls, o.correct) == (True, 0.1, 9, True)
        assert o.serial_reduction == pytest.approx(0.9)
        assert o.serial_tokens_used == 10


def test_adaptive_commit_at_030():
    probs, b, rolls = population(commit_fraction=0.3, forceable_fraction=0.4)
    o = run_baee_adaptive(b, probs[0], rolls[0], BaeePolicy(theta=1.0, trigger="offline"))
    assert o.trigger_fraction == 0.3 and o.api_calls == 3 * 8 + 1
    assert o.serial_reduction == pytest.approx(0.7)


def test_adaptive_never_committing():
    probs, b, rolls = population(commit_fraction=0.95, forceable_fraction=0.95, n_distractors=40)
    for p, r in zip(probs, rolls):
        o = run_baee_adaptive(b, p, r, BaeePolicy(theta=1.0))
        assert not o.triggered and o.api_calls == 73
        assert o.answer.normalized == r.answer and o.correct == r.correct


def test_simulated_and_live_agree():
    from gapprobe.probes import continuation_budget, run_psc

    probs, b, rolls = population(commit_fraction=0.3, forceable_fraction=0.5)
    for p, r in zip(probs, rolls):
        psc = tuple(
            run_psc(b, p, r.prefix(f), f, max_tokens=continuation_budget(r.length, f)) for f in DEFAULT_GRID
        )
        rec = ProblemResults(p.id, p.ground_truth, DEFAULT_GRID, psc, normalize_answer(r.answer), r.correct, r.length)
        pol = BaeePolicy(theta=1.0)
        live = run_baee_adaptive(b, p, r, pol)
        sim = simulate(rec, pol)
        assert sim == live


def test_all_mode_agrees_on_trigger():
    recs = [record("a", [2, 5, 8, 8, 8, 8, 8, 8, 8]), record("b", [8] * 9), record("c", [0] * 9)]
    pol = BaeePolicy(theta=0.75, trigger="offline")
    ad = [simulate(r, pol) for r in recs]
    al = run_baee_all(recs, pol).outcomes
    for x, y in zip(ad, al):
        assert x.trigger_fraction == y.trigger_fraction
        assert y.api_calls == 73
    assert [o.api_calls for o in ad] == [3 * 8 + 1, 9, 73]


def test_all_mode_fixtures():
    uniform = [record(f"u{i}", [8] * 9) for i in range(4)]
    run = run_baee_all(uniform, BaeePolicy(theta=1.0))
    assert run.accuracy == 1.0 and run.mean_reduction == pytest.approx(0.9)
    mixed = [record("t", [8] * 9), record("n", [0] * 9, full_correct=True)]
    run = run_baee_all(mixed, BaeePolicy(theta=1.0, trigger="offline"))
    assert run.accuracy == 1.0 and run.mean_reduction == pytest.approx(0.45)


def test_incomplete_grid_rejected():
    with pytest.raises(ContractViolation):
        record("a", [8] * 8)


def test_tie_fallback():
    tie = psc_from_answers(0.1, ["1"] * 4 + ["2"] * 4, "1")
    later = psc_from_counts(0.2, 8, "1")
    rest = [psc_from_counts(f, 8, "1") for f in DEFAULT_GRID.fractions[2:]]
    rec = ProblemResults("t", "1", DEFAULT_GRID, (tie, later, *rest), normalize_answer("1"), True, 100)
    assert simulate(rec, BaeePolicy(theta=0.5)).trigger_fraction == 0.2
    assert simulate(rec, BaeePolicy(theta=0.5, tie_fallback=False)).trigger_fraction == 0.1


def test_deployment_vs_offline_trigger():
    # samples agree on a wrong answer: deployment fires and is wrong, offline never fires
    rec = record("w", [0] * 9, full_correct=False)
    dep = simulate(rec, BaeePolicy(theta=1.0))
    off = simulate(rec, BaeePolicy(theta=1.0, trigger="offline"))
    assert dep.triggered and not dep.correct
    assert not off.triggered and off.answer.normalized == "wrong-full"


@given(st.lists(st.integers(0, 8), min_size=9, max_size=9), st.integers(1, 8), st.booleans())
def test_call_accounting_and_fallback(counts, m, full_ok):
    rec = record("h", counts, full_correct=full_ok)
    o = simulate(rec, BaeePolicy(theta=m / 8, trigger="offline", tie_fallback=False))
    if o.triggered:
        j = DEFAULT_GRID.index(o.trigger_fraction)
        assert o.api_calls == (j + 1) * 8 + 1
        assert counts[j] >= m and all(c < m for c in counts[:j])
    else:
        assert o.api_calls == 73
        assert o.correct == full_ok and o.answer == rec.full_answer


def test_naive_efa_and_oracle_on_gap_band():
    probs, b, rolls = population(commit_fraction=0.1, forceable_fraction=0.4)
    for p, r in zip(probs, rolls):
        naive = run_naive_efa(p, r, backend=b)
        assert naive.trigger_fraction == 0.1 and not naive.correct and naive.api_calls == 2
        oracle = run_efa_oracle(p, r, backend=b)
        assert oracle.trigger_fraction == 0.4 and oracle.correct and oracle.api_calls == 5


def test_naive_efa_forceable_early():
    probs, b, rolls = population(commit_fraction=0.1, forceable_fraction=0.1)
    o = run_naive_efa(probs[0], rolls[0], backend=b)
    assert o.correct and o.serial_reduction == pytest.approx(0.9)


def test_efa_walk_fallbacks():
    r = Rollout("p", ("a",) * 10, "a" * 10, True, answer="7")
    from gapprobe.core import ProblemRecord

    p = ProblemRecord("p", "x", "7")
    empty = [EfaResult(f, "original", "", normalize_answer(""), False) for f in DEFAULT_GRID]
    o = run_naive_efa(p, r, efa=empty)
    assert not o.triggered and o.answer.normalized == "7" and o.api_calls == 10
    o = run_efa_oracle(p, r, efa=empty)
    assert not o.triggered and o.correct
    with pytest.raises(ContractViolation):
        run_naive_efa(p, r)


def test_sc_baselines():
    probs, b, _ = population(commit_fraction=0.1, cold_start_accuracy=1.0)
    assert run_sc_baselines(b, probs[0], "sc8_full").correct
    out = run_sc_baselines(b, probs[0], "sc8_budget", budget=0)
    assert out.no_answer and not out.correct
    probs, b, _ = population(commit_fraction=0.1, cold_start_accuracy=0.0)
    assert not run_sc_baselines(b, probs[0], "sc8_full").correct
    with pytest.raises(ContractViolation):
        run_sc_baselines(b, probs[0], "sc8_budget")
    with pytest.raises(ContractViolation):
        run_sc_baselines(b, probs[0], "other")


def test_sc_wrong_while_baee_right():
    probs, b, _ = population(commit_fraction=0.1, cold_start_accuracy=0.0)
    r = Rollout(probs[0].id, tuple(f" t{i}" for i in range(99)) + ("\n\\boxed{9}",),
                "".join(f" t{i}" for i in range(99)) + "\n\\boxed{9}", False, answer="9")
    assert run_baee_adaptive(b, probs[0], r, BaeePolicy(theta=1.0)).correct
    assert not run_sc_baselines(b, probs[0], "sc8_full").correct


def test_sc_budget_caps_tokens():
    probs, b, _ = population(commit_fraction=0.1)
    out = run_sc_baselines(b, probs[0], "single_budget", budget=5)
    assert out.total_tokens <= 5 and out.api_calls == 1


def _outcome(trig, f, used, full, probe, calls=9):
    return BaeeOutcome("p", "s", trig, f, normalize_answer("1"), True, calls, used, full, probe_tokens=probe)


def test_cost_report_examples():
    rep = cost_report([_outcome(True, 0.5, 1000, 2000, 1000)])
    assert rep.token_ratio == pytest.approx(1.0)
    assert rep.mean_serial_reduction == pytest.approx(0.5)
    rep = cost_report([_outcome(False, None, 100, 100, 50, 73)])
    assert rep.mean_serial_reduction == 0 and rep.token_ratio >= 1
    # all trigger at 0.10 with probes at 1.05x the remaining trace
    T = 1000
    rep = cost_report([_outcome(True, 0.1, 100, T, round(8 * 1.05 * 900))])
    assert rep.token_ratio == pytest.approx(0.10 + 8 * 1.05 * 0.90, abs=1e-3)
    assert rep.trigger_rate_by_fraction == {0.1: 1.0}
    with pytest.raises(ContractViolation):
        cost_report([])


def test_strategy_rows_shape():
    outs = [_outcome(True, 0.1, 10, 100, 0)]
    rows = strategy_rows("m", {"psc_adaptive": outs}, 0.9)
    assert rows[0][0] == "full_cot" and rows[1][:3] == ("psc_adaptive", "no", 9.0)


def test_guarantee_values():
    g = guarantee(8, 0.75, 0.25)
    assert g.p_k_floor == 0.5
    assert g.confidence_hoeffding == pytest.approx(1 - 2 * math.exp(-1))
    assert g.confidence_hoeffding == pytest.approx(0.264, abs=1e-3)
    assert g.confidence_exact == pytest.approx(1 - 74 / 256, abs=1e-12)
    # the strict reading is worst at p near 3/8 and 5/8, not at 1/2 where it is 18/256
    scipy_stats = pytest.importorskip("scipy.stats")
    from fractions import Fraction

    def strict_tail(p):
        return sum(
            scipy_stats.binom.pmf(x, 8, p) for x in range(9) if abs(Fraction(x, 8) - Fraction(p)) > Fraction(1, 4)
        )

    assert strict_tail(0.5) == pytest.approx(18 / 256, abs=1e-12)
    worst = max(strict_tail(i / 1000) for i in range(1001))
    assert g.confidence_exact_strict == pytest.approx(1 - worst, abs=1e-12)
    assert g.confidence_exact_strict < 1 - 18 / 256
    assert guarantee(32, 0.75, 0.25).confidence_hoeffding == pytest.approx(1 - 2 * math.exp(-4))
    assert guarantee(8, 0.75, 0.75 - 1e-9).p_k_floor == pytest.approx(0.0, abs=1e-8)
    with pytest.raises(ContractViolation):
        guarantee(8, 0.75, 0.75)


def test_baee_paths_never_force_extraction():
    """Audit: only the two named EFA baselines reach run_efa."""
    tree = ast.parse(Path(inspect.getsourcefile(baee_mod)).read_text())
    callers = set()
    for fn in [n for n in ast.walk(tree) if isinstance(n, ast.FunctionDef)]:
        for node in ast.walk(fn):
            if isinstance(node, ast.Call) and getattr(node.func, "id", None) == "run_efa":
                callers.add(fn.name)
    assert callers == {"_efa_walk"}
    walk_users = set()
    for fn in [n for n in ast.walk(tree) if isinstance(n, ast.FunctionDef)]:
        for node in ast.walk(fn):
            if isinstance(node, ast.Call) and getattr(node.func, "id", None) == "_efa_walk":
                walk_users.add(fn.name)
    assert walk_users == {"run_naive_efa", "run_efa_oracle"}
