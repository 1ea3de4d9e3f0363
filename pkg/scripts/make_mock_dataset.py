#!/usr/bin/env python3
"""Write a JSONL dataset whose problems carry per-problem mock behaviour.

Difficulty d (1..5) plants commitment later for harder problems, and a share
of problems never commit so calibration has false positives to work with.

    python3 scripts/make_mock_dataset.py data/mock.jsonl --n 60 --seed 1
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from gapprobe.core import ProblemRecord, write_problems

COMMIT_BY_DIFFICULTY = {1: 0.1, 2: 0.2, 3: 0.3, 4: 0.4, 5: 0.5}


def make(n: int, seed: int, never_commit: float, gap: float) -> list[ProblemRecord]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        d = int(rng.integers(1, 6))
        hard = rng.random() < never_commit
        commit = 0.95 if hard else COMMIT_BY_DIFFICULTY[d]
        mock = {
            "commit_fraction": commit,
            "forceable_fraction": min(0.95, commit + gap),
            "rollout_length": int(rng.integers(80, 240)),
            "cold_start_accuracy": 0.1 if hard else 0.95,
        }
        if hard:
            # many distractors, so free continuations rarely agree by chance
            mock["distractors"] = [str(1000 + 7 * j + i) for j in range(40)]
        out.append(
            ProblemRecord(
                id=f"m{i:04d}",
                prompt=f"Mock problem {i:04d}: report the planted integer.\n",
                ground_truth=str(-(i + 1)),
                difficulty=d,
                benchmark="mock",
                metadata={"mock": mock},
            )
        )
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("path", type=Path)
    ap.add_argument("--n", type=int, default=60)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--never-commit", type=float, default=0.15, help="share of problems that never commit")
    ap.add_argument("--gap", type=float, default=0.3, help="forceable minus commit fraction")
    args = ap.parse_args()
    args.path.parent.mkdir(parents=True, exist_ok=True)
    problems = make(args.n, args.seed, args.never_commit, args.gap)
    write_problems(args.path, problems)
    print(f"wrote {len(problems)} problems to {args.path}")


if __name__ == "__main__":
    main()
