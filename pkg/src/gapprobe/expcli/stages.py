"""Data-producing stages: rollout, probe and perturb, plus run loading."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from ..baee import ProblemResults
from ..core import (
    CheckpointGrid,
    ConfigurationError,
    ProblemRecord,
    Rollout,
    grade,
    load_problems,
    normalize_answer,
    prefix_length,
    write_problems,
)
from ..io import append_jsonl, atomic_write_text, read_jsonl, write_csv
from ..modelclient.base import Backend, GenerationRequest, TopK
from ..modelclient.http import HttpBackend, HttpConfig
from ..modelclient.mock import MockBackend, MockModelSpec
from ..probes import (
    ORIGINAL,
    TEMPLATES,
    EfaResult,
    PscResult,
    continuation_budget,
    entropy_series,
    extract_answer,
    run_atlt,
    run_batch,
    run_efa,
    run_psc,
)
from ..stats import derive_seed
from .config import ExperimentConfig
from .manifest import RunManifest, open_manifest

ROLLOUTS = "rollout/rollouts.jsonl"
PSC = "probe/psc.jsonl"
EFA = "probe/efa.jsonl"
ATLT = "probe/atlt.jsonl"
ED = "probe/ed.jsonl"
PROBE_DONE = "probe/done.jsonl"
PERTURB = "perturb/perturb.jsonl"
PERTURB_DONE = "perturb/done.jsonl"


class MissingStageError(RuntimeError):
    def __init__(self, stage: str, detail: str = ""):
        self.stage = stage
        msg = f"required stage '{stage}' has not been run; run `gapprobe {stage}` first"
        super().__init__(msg + (f" ({detail})" if detail else ""))


@dataclass
class Run:
    config: ExperimentConfig
    dir: Path
    problems: list[ProblemRecord]
    backend: Backend | None
    manifest: RunManifest

    def path(self, rel: str) -> Path:
        return self.dir / rel

    def report(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        return write_csv(self.dir / "reports" / name, header, rows)


# -- dataset and backend ------------------------------------------------------------


def mock_problems(config: ExperimentConfig) -> list[ProblemRecord]:
    return [
        ProblemRecord(
            id=f"mock-{i:04d}",
            prompt=f"Problem mock-{i:04d}: compute the planted value.\n",
            ground_truth=str(-(i + 1)),
            difficulty=1 + i % 5,
            benchmark="mock",
        )
        for i in range(config.mock_n_problems)
    ]


def mock_spec_for(problem: ProblemRecord, config: ExperimentConfig) -> MockModelSpec:
    """Default mock behaviour from the config, overridden by a per-problem ``mock`` mapping."""
    answer = normalize_answer(problem.ground_truth).normalized
    kw: dict[str, Any] = dict(
        answer=answer,
        distractors=tuple(d for d in ("0", "1", "2", "3") if d != answer)[:3],
        commit_fraction=config.mock_commit_fraction,
        forceable_fraction=config.mock_forceable_fraction,
        rollout_length=config.mock_rollout_length,
        cold_start_accuracy=config.mock_cold_start_accuracy,
        curve_kind=config.mock_curve,
        seed=derive_seed(config.seed, "mock", problem.id),
    )
    override = dict(problem.metadata.get("mock", {}))
    if "recoverability_curve" in override:
        override["recoverability_curve"] = tuple(tuple(pt) for pt in override["recoverability_curve"])
    if "distractors" in override:
        override["distractors"] = tuple(override["distractors"])
    kw.update(override)
    try:
        return MockModelSpec(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{problem.id}: cannot build a mock for this problem: {exc}") from None


def build_backend(config: ExperimentConfig, problems: Sequence[ProblemRecord]) -> Backend:
    if config.backend == "mock":
        return MockBackend({p.prompt: mock_spec_for(p, config) for p in problems})
    return HttpBackend(
        HttpConfig(
            url=config.http_url,
            token=config.http_token,
            model=config.http_model,
            timeout=config.http_timeout,
            max_attempts=config.http_max_attempts,
            requests_per_second=config.http_requests_per_second or None,
            supports_scoring=config.http_supports_scoring,
        )
    )


def open_run(config: ExperimentConfig, backend: Backend | None = None, *, need_backend: bool = True) -> Run:
    run_dir = Path(config.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = open_manifest(run_dir, config.config_hash())
    if config.dataset:
        problems = load_problems(config.dataset)
    elif config.backend == "mock":
        problems = mock_problems(config)
    else:
        raise ConfigurationError("set `dataset` in the config (required for the http backend)")
    if not problems:
        raise ConfigurationError("dataset is empty")
    if not (run_dir / "problems.jsonl").exists():
        write_problems(run_dir / "problems.jsonl", problems)
    atomic_write_text(run_dir / "config.txt", config.dump())
    if backend is None and need_backend:
        backend = build_backend(config, problems)
    return Run(config, run_dir, problems, backend, manifest)


def _chunks(items: Sequence[Any], size: int) -> Iterable[Sequence[Any]]:
    for i in range(0, len(items), size):
        yield items[i : i + size]


def _run_chunked(
    run: Run,
    stage: str,
    todo: Sequence[ProblemRecord],
    work: Callable[[ProblemRecord], dict[str, list[dict[str, Any]]]],
    done_file: str | None,
    done_extra: dict[str, Any] | None = None,
) -> None:
    """Process problems in bounded parallel chunks, persisting after each chunk."""
    par = run.config.parallelism
    finished = run.manifest.progress.get(stage, 0)
    for chunk in _chunks(list(todo), max(1, par)):
        results = run_batch([(p.id, partial(work, p)) for p in chunk], par)
        for p in chunk:
            for rel, recs in results[p.id].items():
                append_jsonl(run.path(rel), recs)
            if done_file:
                append_jsonl(run.path(done_file), [{"problem_id": p.id, **(done_extra or {})}])
        finished += len(chunk)
        run.manifest.advance(stage, finished, run.dir)


# -- rollout -----------------------------------------------------------------------


def _top_record(top: Sequence[TopK]) -> list[Any]:
    return [[[list(e) for e in t.entries], t.tail_mass] for t in top]


def _top_from_record(rec: list[Any]) -> list[TopK]:
    return [TopK(tuple((tok, float(lp)) for tok, lp in entries), float(tail)) for entries, tail in rec]


def load_rollouts(run: Run) -> dict[str, dict[int, dict[str, Any]]]:
    out: dict[str, dict[int, dict[str, Any]]] = {}
    for d in read_jsonl(run.path(ROLLOUTS)):
        out.setdefault(d["problem_id"], {}).setdefault(int(d["index"]), d)
    return out


def first_rollouts(run: Run) -> dict[str, tuple[Rollout, list[TopK] | None]]:
    raw = load_rollouts(run)
    if not raw:
        raise MissingStageError("rollout")
    out = {}
    for pid, by_idx in raw.items():
        if 0 in by_idx:
            d = by_idx[0]
            top = _top_from_record(d["top_logprobs"]) if d.get("top_logprobs") else None
            out[pid] = (Rollout.from_dict(d), top)
    return out


def cmd_rollout(run: Run) -> Path:
    cfg = run.config
    existing = load_rollouts(run)
    todo = [p for p in run.problems if len(existing.get(p.id, {})) < cfg.n_rollouts]
    backend = run.backend
    want_top = cfg.topk if "ed" in cfg.probe_set and backend.capabilities.top_logprobs else None

    def work(p: ProblemRecord) -> dict[str, list[dict[str, Any]]]:
        res = backend.sample(
            GenerationRequest(
                prompt=p.prompt, temperature=1.0, max_tokens=cfg.max_tokens,
                n_samples=cfg.n_rollouts, want_top_logprobs=want_top,
            )
        )
        recs = []
        for i, (text, toks) in enumerate(zip(res.texts, res.tokens_per_completion)):
            toks = tuple(toks) if toks else (text,)
            ans = extract_answer(text)
            r = Rollout(p.id, toks, text, grade(ans, p.ground_truth, cfg.grader), 1.0, i, ans.normalized)
            d = r.to_dict()
            if i == 0 and res.top_logprobs is not None:
                d["top_logprobs"] = _top_record(res.top_logprobs[0])
            d["ts"] = time.time()
            recs.append(d)
        return {ROLLOUTS: recs}

    run.manifest.mark("rollout", "running", run.dir)
    _run_chunked(run, "rollout", todo, work, None)
    run.manifest.mark("rollout", "complete", run.dir)
    return write_rollout_report(run)


ROLLOUT_HEADER = ("problem_id", "n_rollouts", "n_correct", "first_correct", "first_length")


def write_rollout_report(run: Run) -> Path:
    raw = load_rollouts(run)
    rows = []
    for p in run.problems:
        by_idx = raw.get(p.id, {})
        first = by_idx.get(0)
        rows.append((
            p.id, len(by_idx), sum(bool(d["correct"]) for d in by_idx.values()),
            None if first is None else bool(first["correct"]),
            None if first is None else len(first["tokens"]),
        ))
    return run.report("rollouts.csv", ROLLOUT_HEADER, rows)


# -- probe -------------------------------------------------------------------------


def _fkey(f: float) -> float:
    return round(float(f), 9)


def probe_key(cfg: ExperimentConfig, grid: CheckpointGrid, probes: Sequence[str], ablation: bool) -> str:
    return f"{','.join(map(str, grid))}|{','.join(sorted(probes))}|{int(ablation)}"


def cmd_probe(
    run: Run,
    probes: Sequence[str] | None = None,
    grid: CheckpointGrid | None = None,
    suffix_ablation: bool | None = None,
) -> None:
    """Run the selected probes at every grid fraction on each problem's first rollout."""
    cfg = run.config
    probes = tuple(probes or cfg.probe_set)
    grid = grid or cfg.checkpoint_grid
    ablation = cfg.suffix_ablation if suffix_ablation is None else suffix_ablation
    rollouts = first_rollouts(run)
    key = probe_key(cfg, grid, probes, ablation)
    done = {d["problem_id"] for d in read_jsonl(run.path(PROBE_DONE)) if d.get("key") == key}
    missing = [p.id for p in run.problems if p.id not in rollouts]
    if missing:
        raise MissingStageError("rollout", f"no rollout for {len(missing)} problems")
    todo = [p for p in run.problems if p.id not in done]
    backend = run.backend
    templates = list(TEMPLATES.values()) if ablation else [ORIGINAL]

    def work(p: ProblemRecord) -> dict[str, list[dict[str, Any]]]:
        rollout, top = rollouts[p.id]
        T = rollout.length
        out: dict[str, list[dict[str, Any]]] = {PSC: [], EFA: [], ATLT: [], ED: []}
        ts = time.time()
        for f in grid:
            prefix = rollout.prefix(f)
            if "psc" in probes:
                r = run_psc(backend, p, prefix, f, n=cfg.n_psc, grader=cfg.grader, max_tokens=continuation_budget(T, f))
                out[PSC].append({"problem_id": p.id, **r.to_record(), "ts": ts})
            if "efa" in probes:
                for t in templates:
                    e = run_efa(backend, p, prefix, f, t, grader=cfg.grader, max_tokens=cfg.efa_max_tokens)
                    out[EFA].append({"problem_id": p.id, **e.to_record(), "ts": ts})
            if "atlt" in probes:
                a = run_atlt(backend, p, prefix, [p.ground_truth], f)
                out[ATLT].append({"problem_id": p.id, **a.to_record(), "ts": ts})
        if "ed" in probes:
            if top:
                out[ED].append({"problem_id": p.id, "status": "ok", **entropy_series(top).to_record()})
            else:
                out[ED].append({"problem_id": p.id, "status": "unsupported"})
        return {k: v for k, v in out.items() if v}

    run.manifest.mark("probe", "running", run.dir)
    _run_chunked(run, "probe", todo, work, PROBE_DONE, {"key": key})
    run.manifest.mark("probe", "complete", run.dir)


def load_psc(run: Run) -> dict[tuple[str, float], PscResult]:
    out: dict[tuple[str, float], PscResult] = {}
    for d in read_jsonl(run.path(PSC)):
        out.setdefault((d["problem_id"], _fkey(d["fraction"])), PscResult.from_record(d))
    return out


def load_efa(run: Run) -> dict[tuple[str, float, str], EfaResult]:
    out: dict[tuple[str, float, str], EfaResult] = {}
    for d in read_jsonl(run.path(EFA)):
        out.setdefault((d["problem_id"], _fkey(d["fraction"]), d["suffix_template"]), EfaResult.from_record(d))
    return out


def load_ed(run: Run) -> dict[str, dict[str, Any]]:
    out: dict[str, dict[str, Any]] = {}
    for d in read_jsonl(run.path(ED)):
        out.setdefault(d["problem_id"], d)
    return out


def load_atlt(run: Run) -> dict[tuple[str, float], dict[str, Any]]:
    out: dict[tuple[str, float], dict[str, Any]] = {}
    for d in read_jsonl(run.path(ATLT)):
        out.setdefault((d["problem_id"], _fkey(d["fraction"])), d)
    return out


def problem_results(run: Run, *, with_efa: bool = False) -> list[ProblemResults]:
    """Per-problem bundles in dataset order (the order calibration splits use)."""
    grid = run.config.checkpoint_grid
    raw = load_rollouts(run)
    if not raw:
        raise MissingStageError("rollout")
    psc = load_psc(run)
    efa = load_efa(run) if with_efa else {}
    out = []
    for p in run.problems:
        by_idx = raw.get(p.id)
        if not by_idx or 0 not in by_idx:
            raise MissingStageError("rollout", f"no rollout for {p.id}")
        series = []
        for f in grid:
            r = psc.get((p.id, _fkey(f)))
            if r is None:
                raise MissingStageError("probe", f"no PSC for {p.id} at f={f}")
            series.append(r)
        efas: tuple[EfaResult, ...] = ()
        if with_efa:
            got = [efa.get((p.id, _fkey(f), ORIGINAL.id)) for f in grid]
            if any(e is None for e in got):
                raise MissingStageError("probe", f"no EFA for {p.id}")
            efas = tuple(got)
        first = by_idx[0]
        out.append(
            ProblemResults(
                problem_id=p.id,
                ground_truth=p.ground_truth,
                grid=grid,
                psc=tuple(series),
                full_answer=normalize_answer(first["answer"]),
                full_correct=bool(first["correct"]),
                rollout_length=len(first["tokens"]),
                rollouts_correct=sum(bool(d["correct"]) for d in by_idx.values()),
                n_rollouts=len(by_idx),
                efa=efas,
                difficulty=p.difficulty,
            )
        )
    return out


# -- perturb -----------------------------------------------------------------------

PERTURB_SHARE = {"truncate_20": 0.2, "shuffle_30": 0.3, "replace_30": 0.3}
MIN_WINDOW = 2


def perturb_window(n_tokens: int, kind: str) -> int:
    if kind not in PERTURB_SHARE:
        raise ConfigurationError(f"unknown perturbation {kind!r}")
    return math.floor(PERTURB_SHARE[kind] * n_tokens + 1e-9)


def perturb_prefix(
    tokens: Sequence[str], kind: str, rng: np.random.Generator, vocabulary: Sequence[str] = ()
) -> tuple[str, ...] | None:
    """Perturbed copy of the prefix tokens, or None when the window is under two tokens."""
    n = len(tokens)
    w = perturb_window(n, kind)
    if w < MIN_WINDOW:
        return None
    head, tail = list(tokens[: n - w]), list(tokens[n - w :])
    if kind == "truncate_20":
        return tuple(head)
    if kind == "shuffle_30":
        return tuple(head + [tail[i] for i in rng.permutation(w)])
    if not vocabulary:
        raise ConfigurationError("replace_30 needs a nonempty vocabulary")
    picks = rng.integers(0, len(vocabulary), size=w)
    return tuple(head + [vocabulary[int(i)] for i in picks])


def run_vocabulary(run: Run) -> list[str]:
    """Multiset of tokens seen across all rollouts, in a stable order."""
    vocab: list[str] = []
    for by_idx in load_rollouts(run).values():
        for i in sorted(by_idx):
            vocab.extend(by_idx[i]["tokens"])
    return sorted(vocab)


def cmd_perturb(run: Run, kinds: Sequence[str] | None = None, fractions: Sequence[float] | None = None) -> Path:
    cfg = run.config
    kinds = tuple(kinds or cfg.perturbations)
    fractions = tuple(fractions or cfg.perturb_at)
    for k in kinds:
        perturb_window(10, k)
    rollouts = first_rollouts(run)
    vocab = run_vocabulary(run)
    key = f"{','.join(kinds)}|{','.join(map(str, fractions))}"
    done = {d["problem_id"] for d in read_jsonl(run.path(PERTURB_DONE)) if d.get("key") == key}
    todo = [p for p in run.problems if p.id not in done and p.id in rollouts]
    backend = run.backend

    def work(p: ProblemRecord) -> dict[str, list[dict[str, Any]]]:
        rollout, _ = rollouts[p.id]
        T = rollout.length
        recs = []
        for f in fractions:
            toks = rollout.tokens[: prefix_length(T, f)]
            budget = continuation_budget(T, f)
            ctrl = run_psc(backend, p, "".join(toks), f, n=cfg.n_psc, grader=cfg.grader, max_tokens=budget)
            recs.append({"problem_id": p.id, "fraction": f, "kind": "intact", "psc_value": ctrl.psc_value,
                         "prefix_tokens": len(toks), "skipped": False})
            for kind in kinds:
                rng = np.random.default_rng(derive_seed(cfg.seed, "perturb", kind, p.id, f))
                new = perturb_prefix(toks, kind, rng, vocab)
                if new is None:
                    recs.append({"problem_id": p.id, "fraction": f, "kind": kind, "psc_value": None,
                                 "prefix_tokens": len(toks), "skipped": True})
                    continue
                r = run_psc(backend, p, "".join(new), f, n=cfg.n_psc, grader=cfg.grader, max_tokens=budget)
                recs.append({"problem_id": p.id, "fraction": f, "kind": kind, "psc_value": r.psc_value,
                             "prefix_tokens": len(new), "skipped": False})
        return {PERTURB: recs}

    run.manifest.mark("perturb", "running", run.dir)
    _run_chunked(run, "perturb", todo, work, PERTURB_DONE, {"key": key})
    run.manifest.mark("perturb", "complete", run.dir)
    return write_perturb_report(run, kinds, fractions)


PERTURB_HEADER = ("fraction", "perturbation", "mean_psc", "drops_gt_10pp", "n_evaluated", "n_skipped")
DROP_THRESHOLD = 0.10


def perturbation_summary(
    records: Iterable[dict[str, Any]], kinds: Sequence[str], fractions: Sequence[float]
) -> list[tuple]:
    by: dict[tuple[str, float, str], dict[str, Any]] = {}
    for d in records:
        by.setdefault((d["problem_id"], _fkey(d["fraction"]), d["kind"]), d)
    pids = sorted({k[0] for k in by})
    rows = []
    for f in fractions:
        fk = _fkey(f)
        ctrl = {pid: by[(pid, fk, "intact")]["psc_value"] for pid in pids if (pid, fk, "intact") in by}
        vals = list(ctrl.values())
        rows.append((f, "intact", float(np.mean(vals)) if vals else None, None, len(vals), 0))
        for kind in kinds:
            got = [by[(pid, fk, kind)] for pid in pids if (pid, fk, kind) in by]
            ok = [d for d in got if not d["skipped"] and d["problem_id"] in ctrl]
            drops = sum(ctrl[d["problem_id"]] - d["psc_value"] > DROP_THRESHOLD + 1e-12 for d in ok)
            mean = float(np.mean([d["psc_value"] for d in ok])) if ok else None
            rows.append((f, kind, mean, drops, len(ok), len(got) - len(ok)))
    return rows


def write_perturb_report(run: Run, kinds: Sequence[str], fractions: Sequence[float]) -> Path:
    rows = perturbation_summary(read_jsonl(run.path(PERTURB)), kinds, fractions)
    return run.report("perturbation.csv", PERTURB_HEADER, rows)
