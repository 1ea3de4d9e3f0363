"""Report stages: thin adapters from persisted probe data to module analyses."""

from __future__ import annotations

import math
from collections import Counter
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from ..baee import (
    SC_VARIANTS,
    STRATEGY_HEADER,
    BaeeOutcome,
    BaeePolicy,
    ProblemResults,
    cost_report,
    outcomes_from,
    run_baee_all,
    run_efa_oracle,
    run_naive_efa,
    run_sc_baselines,
    strategy_rows,
)
from ..calibration import (
    CALIBRATION_HEADER,
    STABILITY_HEADER,
    SWEEP_HEADER,
    TRACE_HEADER,
    CalibrationConfig,
    calibrate,
    calibration_row,
    stability_bootstrap,
    stability_row,
    sweep_rows,
    threshold_sweep,
    trace_rows,
)
from ..commitment import (
    COMMITMENT_MAP_HEADER,
    TV_TABLE_HEADER,
    PscTrajectory,
    commitment_fraction,
    export_commitment_map,
    gap_profile,
    suffix_gap_ranking,
    tv_bound_table,
)
from ..core import prefix_length
from ..fpfilter import (
    AUDIT_HEADER,
    FEATURE_HEADER,
    SUMMARY_HEADER,
    audit_row,
    extract_features,
    feature_rows,
    feature_summary,
    filter_rates,
)
from ..io import atomic_write_text, read_csv
from ..probes import TEMPLATES, EntropySeries, commit_entropy_ratio, run_batch
from ..stats import (
    bootstrap_ci,
    derive_seed,
    holm_bonferroni,
    mann_whitney_u,
    paired_signflip_test,
    permutation_test,
)
from .stages import (
    MissingStageError,
    Run,
    _fkey,
    first_rollouts,
    load_ed,
    load_efa,
    problem_results,
)


def trajectories(records: Sequence[ProblemResults], mode: str = "offline") -> list[PscTrajectory]:
    return [
        PscTrajectory(
            r.problem_id, r.grid, tuple(p.signal(mode) for p in r.psc), r.solvable, r.rollout_length
        )
        for r in records
    ]


def _policy(run: Run, records: Sequence[ProblemResults]) -> BaeePolicy:
    cfg = run.config
    return BaeePolicy(grid=records[0].grid, theta=cfg.theta, n_samples=cfg.n_psc, trigger=cfg.trigger)


# -- baee ----------------------------------------------------------------------------

OUTCOME_HEADER = (
    "strategy", "problem_id", "triggered", "trigger_fraction", "answer", "correct", "api_calls",
    "serial_tokens_used", "serial_tokens_full", "probe_tokens",
)
COST_HEADER = (
    "strategy", "accuracy", "trigger_rate", "serial_reduction_1_minus_f", "token_ratio_serial_plus_probe_over_full",
    "token_ratio_with_prompt", "median_api_calls", "mean_api_calls",
)
SC_HEADER = ("variant", "accuracy", "no_answer_rate", "mean_completion_tokens", "api_calls_per_problem")


def baee_runs(run: Run) -> tuple[list[ProblemResults], dict[str, list[BaeeOutcome]]]:
    try:
        records = problem_results(run, with_efa=True)
        have_efa = True
    except MissingStageError:
        records = problem_results(run)
        have_efa = False
    policy = _policy(run, records)
    runs: dict[str, list[BaeeOutcome]] = {
        "psc_all": list(run_baee_all(records, policy, grader=run.config.grader).outcomes),
        "psc_adaptive": outcomes_from(records, policy, run.config.grader),
    }
    if have_efa:
        rollouts = first_rollouts(run)
        by_id = {p.id: p for p in run.problems}
        runs["naive_efa"] = [
            run_naive_efa(by_id[r.problem_id], rollouts[r.problem_id][0], r.grid, efa=r.efa, grader=run.config.grader)
            for r in records
        ]
        runs["efa_oracle"] = [
            run_efa_oracle(by_id[r.problem_id], rollouts[r.problem_id][0], r.grid, efa=r.efa, grader=run.config.grader)
            for r in records
        ]
    order = ["naive_efa", "efa_oracle", "psc_all", "psc_adaptive"]
    return records, {k: runs[k] for k in order if k in runs}


def cmd_baee(run: Run) -> Path:
    records, runs = baee_runs(run)
    full_acc = sum(r.full_correct for r in records) / len(records)
    run.report("baee_strategies.csv", STRATEGY_HEADER, strategy_rows(run.config.model, runs, full_acc))
    rows = []
    for name, outs in runs.items():
        for o in outs:
            rows.append((
                name, o.problem_id, o.triggered, o.trigger_fraction, o.answer.normalized, o.correct,
                o.api_calls, o.serial_tokens_used, o.serial_tokens_full, o.probe_tokens,
            ))
    run.report("baee_outcomes.csv", OUTCOME_HEADER, rows)
    write_cost_table(run, runs)
    if run.config.sc_baselines and run.backend is not None:
        write_sc_baselines(run, runs["psc_adaptive"])
    run.manifest.mark("baee", "complete", run.dir)
    return run.dir / "reports" / "baee_strategies.csv"


def write_cost_table(run: Run, runs: dict[str, list[BaeeOutcome]]) -> Path:
    rows = []
    for name, outs in runs.items():
        c = cost_report(outs)
        rows.append((
            name, c.accuracy, c.trigger_rate, c.mean_serial_reduction, c.token_ratio, c.token_ratio_with_prompt,
            c.median_api_calls, c.mean_api_calls,
        ))
    return run.report("cost.csv", COST_HEADER, rows)


def write_sc_baselines(run: Run, adaptive: Sequence[BaeeOutcome]) -> Path:
    cfg = run.config
    by_id = {p.id: p for p in run.problems}
    budgets = {o.problem_id: o.serial_tokens_used + o.probe_tokens for o in adaptive}
    rows = []
    for variant in SC_VARIANTS:
        tasks = [
            (pid, (lambda p=by_id[pid], b=budgets[pid], v=variant: run_sc_baselines(
                run.backend, p, v, b, n=cfg.n_psc, full_max_tokens=cfg.max_tokens, grader=cfg.grader)))
            for pid in budgets
        ]
        res = run_batch(tasks, cfg.parallelism)
        outs = [res[pid] for pid in budgets]
        n = len(outs)
        rows.append((
            variant,
            sum(o.correct for o in outs) / n,
            sum(o.no_answer for o in outs) / n,
            math.fsum(o.total_tokens for o in outs) / n,
            math.fsum(o.api_calls for o in outs) / n,
        ))
    return run.report("sc_baselines.csv", SC_HEADER, rows)


# -- calibrate -----------------------------------------------------------------------


def calibration_config(run: Run, n_resplits: int | None = None) -> CalibrationConfig:
    cfg = run.config
    return CalibrationConfig(
        theta_grid=cfg.thetas,
        split=cfg.calibration_split,
        split_seed=derive_seed(cfg.seed, "split"),
        fp_limit=cfg.fp_limit,
        n_resplits=n_resplits or cfg.n_resplits,
        trigger=cfg.calibration_trigger,
        n_samples=cfg.n_psc,
        master_seed=derive_seed(cfg.seed, "calibration"),
        grader=cfg.grader,
    )


def cmd_calibrate(run: Run, n_resplits: int | None = None) -> Path:
    records = problem_results(run)
    ccfg = calibration_config(run, n_resplits)
    model = run.config.model
    rep = calibrate(records, ccfg)
    run.report("calibration.csv", CALIBRATION_HEADER, [calibration_row(model, rep)])
    run.report("calibration_trace.csv", TRACE_HEADER, trace_rows(rep))
    run.report("threshold_sweep.csv", SWEEP_HEADER, sweep_rows(threshold_sweep(records, ccfg.theta_grid, ccfg)))
    stab = stability_bootstrap(records, ccfg)
    run.report("stability.csv", STABILITY_HEADER, [stability_row(model, stab)])
    counts = sorted(stab.counts.items(), key=lambda kv: -1.0 if kv[0] is None else kv[0])
    run.report(
        "stability_counts.csv", ("theta_star", "count"),
        [("none feasible" if t is None else f"{t:.3f}", c) for t, c in counts],
    )
    run.manifest.mark("calibrate", "complete", run.dir)
    return run.dir / "reports" / "calibration.csv"


# -- filter-fp -------------------------------------------------------------------------


def cmd_filter_fp(run: Run) -> Path:
    """Label triggered problems TP/FP by exit correctness, then apply the filters."""
    records = problem_results(run)
    outs = outcomes_from(records, _policy(run, records), run.config.grader)
    trajs = trajectories(records)
    labeled, audit = [], []
    for r, o, t in zip(records, outs, trajs):
        if not o.triggered:
            continue
        feat = extract_features(t, r.rollout_length)
        labeled.append(("tp" if o.correct else "fp", feat))
        audit.append(audit_row(o, feat))
    run.report("fp_features.csv", FEATURE_HEADER, feature_rows(labeled))
    run.report("fp_audit.csv", AUDIT_HEADER, audit)
    tp = [f for lab, f in labeled if lab == "tp"]
    fp = [f for lab, f in labeled if lab == "fp"]
    run.report("fp_summary.csv", SUMMARY_HEADER, feature_summary(tp, fp) + [("count", len(tp), len(fp))])
    if tp and fp:
        rates = [(x.name, x.fp_removed, x.tp_removed) for x in filter_rates(tp, fp)]
    else:
        rates = [("<none>", None, None)]
    run.report("fp_filter_rates.csv", ("filter", "fp_removed", "tp_removed"), rates)
    run.manifest.mark("filter-fp", "complete", run.dir)
    return run.dir / "reports" / "fp_features.csv"


# -- stats -----------------------------------------------------------------------------

STATS_HEADER = ("test", "statistic", "p_value", "p_holm", "ci_low", "ci_high", "n", "note")


def _cohort(run: Run, pid: str) -> Any:
    key = run.config.stats_cohort_key
    p = next(p for p in run.problems if p.id == pid)
    return p.difficulty if key == "difficulty" else p.metadata.get(key, getattr(p, key, None))


def cmd_stats(run: Run) -> Path:
    cfg = run.config
    records = problem_results(run)
    trajs = trajectories(records)
    rows: list[list[Any]] = []
    commits = {t.problem_id: commitment_fraction(t, cfg.theta) for t in trajs if t.solvable}
    vals = [c for c in commits.values() if c is not None]
    if vals:
        b = bootstrap_ci(vals, n_resamples=cfg.n_bootstrap, seed=derive_seed(cfg.seed, "stats", "bootstrap"))
        rows.append(["bootstrap_commitment_mean", b.point, None, None, b.ci_low, b.ci_high, len(vals), ""])
    else:
        rows.append(["bootstrap_commitment_mean", None, None, None, None, None, 0, "no committed problems"])

    outs = outcomes_from(records, _policy(run, records), cfg.grader)
    diffs = [float(o.correct) - float(r.full_correct) for o, r in zip(outs, records)]
    s = paired_signflip_test(diffs, cfg.n_permutations, derive_seed(cfg.seed, "stats", "signflip"))
    rows.append(["signflip_baee_minus_full", s.statistic, s.p_value, None, None, None, len(diffs), ""])

    groups: dict[Any, list[float]] = {}
    for pid, c in commits.items():
        if c is not None:
            groups.setdefault(_cohort(run, pid), []).append(c)
    if len(groups) == 2:
        (ka, a), (kb, b_) = sorted(groups.items(), key=lambda kv: str(kv[0]))
        perm = permutation_test(a, b_, cfg.n_permutations, derive_seed(cfg.seed, "stats", "cohort"))
        note = f"{cfg.stats_cohort_key}={ka} vs {kb}"
        rows.append(["permutation_cohort_commitment", perm.statistic, perm.p_value, None, None, None, len(a) + len(b_), note])
        mw = mann_whitney_u(a, b_)
        rows.append(["mannwhitney_cohort_commitment", mw.u, mw.p_value, None, None, None, len(a) + len(b_), f"{note} ({mw.method})"])
    else:
        rows.append(["permutation_cohort_commitment", None, None, None, None, None, 0,
                     f"skipped: need exactly 2 {cfg.stats_cohort_key} cohorts, found {len(groups)}"])

    idx = [i for i, r in enumerate(rows) if r[2] is not None]
    adj = holm_bonferroni([rows[i][2] for i in idx])
    for i, a in zip(idx, adj):
        rows[i][3] = a
    run.report("stats.csv", STATS_HEADER, rows)
    run.manifest.mark("stats", "complete", run.dir)
    return run.dir / "reports" / "stats.csv"


# -- analyze ---------------------------------------------------------------------------


def _commitment_reports(run: Run) -> None:
    cfg = run.config
    records = problem_results(run)
    trajs = trajectories(records)
    cmap = export_commitment_map(trajs, cfg.theta)
    run.report("commitment_map.csv", COMMITMENT_MAP_HEADER, cmap.csv_rows())
    solvable = [t for t in trajs if t.solvable]
    commits = [r.commit_fraction for r in cmap.rows]
    run.report(
        "commitment_summary.csv",
        ("theta", "n_solvable", "n_committed", "mean_commit_fraction", "mean_post_commit_fraction", "aggregate_post_commit_share"),
        [(cfg.theta, len(solvable), len(commits), float(np.mean(commits)) if commits else None,
          float(np.mean([1 - c for c in commits])) if commits else None, cmap.aggregate_post_commit_share)],
    )
    hist = Counter(commits)
    run.report("plots/commitment_hist.csv", ("commit_fraction", "count"),
               [(f, hist.get(f, 0)) for f in records[0].grid])
    diff = {r.problem_id: r.difficulty for r in records}
    by_level: dict[Any, list[float]] = {}
    for row in cmap.rows:
        by_level.setdefault(diff.get(row.problem_id), []).append(row.commit_fraction)
    levels = sorted(by_level, key=lambda d: (d is None, d if d is not None else 0))
    run.report("difficulty.csv", ("difficulty", "n_committed", "mean_commit_fraction"),
               [(lv, len(by_level[lv]), float(np.mean(by_level[lv]))) for lv in levels])
    run.report(
        "plots/psc_trajectories.csv", ("problem_id", "fraction", "psc_value", "self_agreement"),
        [(r.problem_id, p.fraction, p.psc_value, p.self_agreement) for r in records for p in r.psc],
    )


def _gap_reports(run: Run) -> None:
    cfg = run.config
    records = problem_results(run, with_efa=True)
    trajs = trajectories(records)
    efa = {r.problem_id: r.efa for r in records}
    prof = gap_profile(trajs, efa, cfg.theta)
    run.report("gap_profile.csv", ("fraction", "psc_trigger_rate", "efa_accuracy", "gap"), prof.rows())
    run.report("plots/gap_profile.csv", ("fraction", "psc_trigger_rate", "efa_accuracy", "gap"), prof.rows())
    pairs = {cfg.model: {f: (p, e) for f, p, e, _ in prof.rows()}}
    run.report("tv_table.csv", TV_TABLE_HEADER, tv_bound_table(pairs))


def _suffix_reports(run: Run) -> None:
    cfg = run.config
    records = problem_results(run)
    all_efa = load_efa(run)
    grid = records[0].grid
    trajs = trajectories(records)
    rows, fixtures = [], {}
    for tid in TEMPLATES:
        pairs = []
        for i, f in enumerate(grid):
            got = [all_efa.get((r.problem_id, _fkey(f), tid)) for r in records]
            if any(g is None for g in got):
                raise MissingStageError("probe", f"suffix ablation data missing for template {tid!r}")
            acc = sum(g.correct for g in got) / len(got)
            rate = sum(t.values[i] >= cfg.theta for t in trajs) / len(trajs)
            rows.append((tid, f, rate, acc, rate - acc))
            pairs.append((rate, acc))
        fixtures[tid] = pairs
    run.report("suffix_ablation.csv", ("template", "fraction", "psc_trigger_rate", "efa_accuracy", "gap"), rows)
    run.report("suffix_ranking.csv", ("rank", "template", "mean_gap"),
               [(i + 1, t, g) for i, (t, g) in enumerate(suffix_gap_ranking(fixtures))])


def _entropy_reports(run: Run) -> None:
    cfg = run.config
    records = problem_results(run)
    ed = load_ed(run)
    if not ed:
        raise MissingStageError("probe", "no entropy series (run probe with ed)")
    rows, series_rows = [], []
    for r, t in zip(records, trajectories(records)):
        d = ed.get(r.problem_id)
        if d is None or d.get("status") != "ok":
            rows.append((r.problem_id, None, None, "unsupported"))
            continue
        s = EntropySeries.from_record(d)
        series_rows.extend((r.problem_id, p, h) for p, h in zip(s.positions, s.per_token_entropy))
        c = commitment_fraction(t, cfg.theta) if t.solvable else None
        if c is None:
            rows.append((r.problem_id, None, None, "uncommitted"))
            continue
        boundary = prefix_length(r.rollout_length, c)
        ratio = commit_entropy_ratio(s, boundary)
        rows.append((r.problem_id, c, ratio, "ok" if ratio is not None else "undefined"))
    ok = [x[2] for x in rows if x[2] is not None]
    rows.append(("<mean>", None, float(np.mean(ok)) if ok else None, f"{len(ok)} problems"))
    run.report("entropy_ratio.csv", ("problem_id", "commit_fraction", "post_pre_ratio", "status"), rows)
    run.report("plots/entropy_series.csv", ("problem_id", "position", "entropy"), series_rows)


def _cost_reports(run: Run) -> None:
    _, runs = baee_runs(run)
    write_cost_table(run, runs)


ANALYSES: tuple[tuple[str, Callable[[Run], None]], ...] = (
    ("commitment", _commitment_reports),
    ("gap_tv", _gap_reports),
    ("suffix_ablation", _suffix_reports),
    ("entropy", _entropy_reports),
    ("fp_features", lambda run: cmd_filter_fp(run) and None),
    ("cost", _cost_reports),
)


def cmd_analyze(run: Run) -> Path:
    """Emit every report the available data supports and list the blocked ones."""
    status = []
    for name, fn in ANALYSES:
        try:
            fn(run)
            status.append((name, "ok", ""))
        except MissingStageError as exc:
            status.append((name, "blocked", str(exc)))
    out = run.report("analyze_status.csv", ("analysis", "status", "detail"), status)
    run.manifest.mark("analyze", "complete", run.dir)
    return out


def cmd_report(run: Run) -> Path:
    """Markdown index of every CSV report with its row count and header."""
    rep_dir = run.dir / "reports"
    if not rep_dir.exists():
        raise MissingStageError("analyze", "no reports yet")
    lines = [f"# Run report ({run.config.model})", "", f"config hash: `{run.manifest.config_hash}`", ""]
    for p in sorted(rep_dir.rglob("*.csv")):
        rows = read_csv(p)
        header = ", ".join(rows[0].keys()) if rows else ""
        lines.append(f"- `{p.relative_to(rep_dir)}`: {len(rows)} rows ({header})")
    out = rep_dir / "summary.md"
    atomic_write_text(out, "\n".join(lines) + "\n")
    return out

