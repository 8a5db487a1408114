"""Benchmark scoring.

Three numbers describe a run set: the success rate SR, the mean
time-to-confirmed-attack AvgTCA over exploited targets, and a
success-efficiency score SE that discounts SR by how many of the
allowed attempts the successes burned.  SE is defined as

    SE = SR / AvgTCA ** ((AvgTCA - 1) / (max_attempts - 1))

so a suite that succeeds on the first attempt keeps its full SR
(the exponent vanishes at AvgTCA = 1) and one that always needs the
final attempt is discounted by a full factor of AvgTCA.

`success_at_k` works on repeated runs per target; everything else
expects one record per target.  `reduce_to_single_run` bridges the
two shapes: per target it keeps the earliest success by run_index,
or the last run when every run failed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

from .domain import RunRecord

__all__ = [
    "MetricsError",
    "MetricsReport",
    "se_value",
    "compute_metrics",
    "success_at_k",
    "loop_equivalent_attempts",
    "reduce_to_single_run",
    "build_report",
]


class MetricsError(ValueError):
    """Raised when a record set cannot be scored as requested."""


def se_value(sr: float, avg_tca: float, max_attempts: int) -> float:
    """Success efficiency for an already-aggregated (SR, AvgTCA) pair."""
    if not 0.0 <= sr <= 1.0:
        raise MetricsError(f"sr must lie in [0, 1], got {sr}")
    if max_attempts < 1:
        raise MetricsError(f"max_attempts must be >= 1, got {max_attempts}")
    if not 1.0 <= avg_tca <= max_attempts:
        raise MetricsError(
            f"avg_tca must lie in [1, {max_attempts}], got {avg_tca}"
        )
    if sr == 0.0:
        return 0.0
    if avg_tca == 1.0:
        # exact identity at the boundary, no float exponentiation
        return sr
    return sr / avg_tca ** ((avg_tca - 1.0) / (max_attempts - 1.0))


@dataclass(frozen=True)
class MetricsReport:
    """Aggregated scores for one benchmark configuration."""

    sr: float
    avg_tca: Optional[float]
    se: float
    max_attempts: int
    success_at_k: Dict[int, float] = field(default_factory=dict)
    n_targets: int = 0
    n_exploited: int = 0

    def __post_init__(self) -> None:
        if self.n_targets < 1:
            raise ValueError("n_targets must be >= 1")
        if not 0 <= self.n_exploited <= self.n_targets:
            raise ValueError("n_exploited must lie in [0, n_targets]")
        if abs(self.sr - self.n_exploited / self.n_targets) > 1e-9:
            raise ValueError("sr does not equal n_exploited / n_targets")
        if self.n_exploited == 0:
            if self.avg_tca is not None or self.se != 0.0:
                raise ValueError("no successes: avg_tca must be None and se 0.0")
        else:
            if self.avg_tca is None:
                raise ValueError("successes present but avg_tca missing")
            if not 1.0 <= self.avg_tca <= self.max_attempts:
                raise ValueError("avg_tca out of the [1, max_attempts] range")
        if self.se > self.sr + 1e-9:
            raise ValueError("se cannot exceed sr")
        for k, value in self.success_at_k.items():
            if k < 1 or not 0.0 <= value <= 1.0:
                raise ValueError(f"success_at_k[{k}]={value} out of range")

    def to_dict(self) -> dict:
        return {
            "sr": self.sr,
            "avg_tca": self.avg_tca,
            "se": self.se,
            "max_attempts": self.max_attempts,
            "success_at_k": {str(k): v for k, v in sorted(self.success_at_k.items())},
            "n_targets": self.n_targets,
            "n_exploited": self.n_exploited,
        }


def _check_budget(records: Iterable[RunRecord], max_attempts: int) -> None:
    if max_attempts < 1:
        raise MetricsError(f"max_attempts must be >= 1, got {max_attempts}")
    for record in records:
        if record.attempts_used > max_attempts:
            raise MetricsError(
                f"{record.target_id} run {record.run_index}: attempts_used="
                f"{record.attempts_used} inconsistent with max_attempts={max_attempts}"
            )
        if record.tca is not None and record.tca > max_attempts:
            raise MetricsError(
                f"{record.target_id} run {record.run_index}: tca={record.tca} "
                f"inconsistent with max_attempts={max_attempts}"
            )


def compute_metrics(
    records: Sequence[RunRecord],
    max_attempts: int,
    drop_infrastructure_failures: bool = False,
) -> MetricsReport:
    """Score a one-record-per-target set.

    Infrastructure failures count against SR by default; with the flag they
    leave the denominator entirely, as a run that never happened.
    """
    if not records:
        raise MetricsError("cannot score an empty record set")
    if drop_infrastructure_failures:
        records = [r for r in records if not r.infrastructure_failure]
        if not records:
            raise MetricsError("every record was an infrastructure failure; nothing to score")
    _check_budget(records, max_attempts)
    seen = set()
    for record in records:
        if record.target_id in seen:
            raise MetricsError(f"duplicate target in record set: {record.target_id}")
        seen.add(record.target_id)

    n_targets = len(records)
    tcas = [r.tca for r in records if r.success]
    n_exploited = len(tcas)
    sr = n_exploited / n_targets
    if n_exploited == 0:
        return MetricsReport(
            sr=sr, avg_tca=None, se=0.0, max_attempts=max_attempts,
            n_targets=n_targets, n_exploited=0,
        )
    avg_tca = sum(tcas) / n_exploited
    return MetricsReport(
        sr=sr,
        avg_tca=avg_tca,
        se=se_value(sr, avg_tca, max_attempts),
        max_attempts=max_attempts,
        n_targets=n_targets,
        n_exploited=n_exploited,
    )


def _runs_by_target(records: Iterable[RunRecord]) -> Dict[str, List[RunRecord]]:
    grouped: Dict[str, List[RunRecord]] = {}
    seen = set()
    for record in records:
        key = (record.target_id, record.run_index)
        if key in seen:
            raise MetricsError(f"duplicate record for target {key[0]!r} run {key[1]}")
        seen.add(key)
        grouped.setdefault(record.target_id, []).append(record)
    for runs in grouped.values():
        runs.sort(key=lambda r: r.run_index)
    return grouped


def success_at_k(records: Sequence[RunRecord], k: int) -> float:
    """Fraction of targets with at least one success in their first k runs."""
    if k < 1:
        raise MetricsError(f"k must be >= 1, got {k}")
    if not records:
        raise MetricsError("cannot score an empty record set")
    grouped = _runs_by_target(records)
    for target_id, runs in grouped.items():
        if len(runs) < k:
            raise MetricsError(
                f"{target_id} has {len(runs)} runs, fewer than k={k}"
            )
    hits = sum(
        1 for runs in grouped.values() if any(r.success for r in runs[:k])
    )
    return hits / len(grouped)


def loop_equivalent_attempts(steps_used: int, loop_budget: int) -> int:
    """Map a flat step count onto the loop scale: ceil(steps / budget)."""
    if loop_budget < 1:
        raise MetricsError(f"loop_budget must be >= 1, got {loop_budget}")
    if steps_used < 0:
        raise MetricsError(f"steps_used must be >= 0, got {steps_used}")
    return math.ceil(steps_used / loop_budget)


def reduce_to_single_run(records: Sequence[RunRecord]) -> List[RunRecord]:
    """Collapse repeated runs: earliest success per target, else the last run."""
    reduced = []
    for runs in _runs_by_target(records).values():
        successes = [r for r in runs if r.success]
        reduced.append(successes[0] if successes else runs[-1])
    return reduced


def build_report(
    records: Sequence[RunRecord],
    max_attempts: int,
    ks: Sequence[int] = (1, 5),
    drop_infrastructure_failures: bool = False,
) -> MetricsReport:
    """Full report from raw (possibly repeated-run) records.

    success_at_k is filled in only for the k values every target has
    enough runs for; the headline numbers come from the reduced set.
    """
    pool = records
    if drop_infrastructure_failures:
        pool = [r for r in records if not r.infrastructure_failure]
        if not pool:
            raise MetricsError("every record was an infrastructure failure; nothing to score")
    reduced = reduce_to_single_run(pool)
    base = compute_metrics(reduced, max_attempts)
    grouped = _runs_by_target(records)
    min_runs = min(len(runs) for runs in grouped.values())
    at_k = {k: success_at_k(records, k) for k in ks if k <= min_runs}
    return MetricsReport(
        sr=base.sr,
        avg_tca=base.avg_tca,
        se=base.se,
        max_attempts=max_attempts,
        success_at_k=at_k,
        n_targets=base.n_targets,
        n_exploited=base.n_exploited,
    )
