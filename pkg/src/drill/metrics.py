"""Batch metrics and PoV similarity analysis."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

from .errors import EmptyBatch, EmptyInput
from .taskmodel import TaskReport

GRAM_SIZE = 4
CHUNK_SIZE = 16
GRAM_WEIGHT = 0.7
CHUNK_WEIGHT = 0.3


@dataclass(frozen=True)
class BatchMetrics:
    total_tasks: int
    validated: int
    variant: int
    resolved_rate: float  # validated / total
    crash_rate: float  # (validated + variant) / total
    avg_cost_per_task: float
    cost_per_success: Optional[float]  # None when validated == 0
    avg_exec_time_min: float

    def to_document(self) -> dict:
        return {
            "total_tasks": self.total_tasks,
            "validated": self.validated,
            "variant": self.variant,
            "resolved_rate": self.resolved_rate,
            "crash_rate": self.crash_rate,
            "resolved_rate_pct": round(self.resolved_rate * 100, 1),
            "crash_rate_pct": round(self.crash_rate * 100, 1),
            "avg_cost_per_task": self.avg_cost_per_task,
            "cost_per_success": self.cost_per_success,
            "avg_exec_time_min": self.avg_exec_time_min,
        }

    @classmethod
    def from_document(cls, doc: dict) -> "BatchMetrics":
        return cls(
            total_tasks=doc["total_tasks"],
            validated=doc["validated"],
            variant=doc["variant"],
            resolved_rate=doc["resolved_rate"],
            crash_rate=doc["crash_rate"],
            avg_cost_per_task=doc["avg_cost_per_task"],
            cost_per_success=doc.get("cost_per_success"),
            avg_exec_time_min=doc["avg_exec_time_min"],
        )

    def render_table(self) -> str:
        cps = "n/a" if self.cost_per_success is None else f"${self.cost_per_success:.2f}"
        rows = [
            ("tasks", str(self.total_tasks)),
            ("validated PoVs", str(self.validated)),
            ("variant PoVs", str(self.variant)),
            ("total crashes", str(self.validated + self.variant)),
            ("resolved rate", f"{self.resolved_rate * 100:.1f}%"),
            ("crash rate", f"{self.crash_rate * 100:.1f}%"),
            ("avg cost/task", f"${self.avg_cost_per_task:.2f}"),
            ("cost/success", cps),
            ("avg exec time", f"{self.avg_exec_time_min:.1f} min"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def compute_metrics(reports: Sequence[TaskReport]) -> BatchMetrics:
    if not reports:
        raise EmptyBatch("no task reports to aggregate")
    total = len(reports)
    validated = sum(1 for r in reports if r.verdict == "validated")
    variant = sum(1 for r in reports if r.verdict == "variant")
    total_cost = sum(r.cost_usd for r in reports)
    total_time = sum(r.wall_time_secs for r in reports)
    return BatchMetrics(
        total_tasks=total,
        validated=validated,
        variant=variant,
        resolved_rate=validated / total,
        crash_rate=(validated + variant) / total,
        avg_cost_per_task=total_cost / total,
        cost_per_success=(total_cost / validated) if validated else None,
        avg_exec_time_min=total_time / total / 60.0,
    )


@dataclass(frozen=True)
class SimilarityScore:
    gram_sim: float
    chunk_sim: float
    score: float


def _grams(data: bytes) -> set[bytes]:
    if len(data) < GRAM_SIZE:
        return {data}
    return {data[i : i + GRAM_SIZE] for i in range(len(data) - GRAM_SIZE + 1)}


def _chunks(data: bytes) -> list[bytes]:
    return [data[i : i + CHUNK_SIZE] for i in range(0, len(data), CHUNK_SIZE)]


def pov_similarity(generated: bytes, ground_truth: bytes) -> SimilarityScore:
    """Dual-metric byte similarity between two inputs.

    gram_sim is the Jaccard similarity of the byte 4-gram sets; chunk_sim is
    the share of identical 16-byte aligned chunks relative to the longer
    file; the score is their 0.7/0.3 weighted sum.
    """
    if not generated or not ground_truth:
        raise EmptyInput("similarity requires non-empty inputs")
    ga, gb = _grams(generated), _grams(ground_truth)
    union = len(ga | gb)
    gram = len(ga & gb) / union if union else 0.0
    ca, cb = Counter(_chunks(generated)), Counter(_chunks(ground_truth))
    shared = sum((ca & cb).values())
    chunk = shared / max(sum(ca.values()), sum(cb.values()))
    return SimilarityScore(
        gram_sim=gram,
        chunk_sim=chunk,
        score=GRAM_WEIGHT * gram + CHUNK_WEIGHT * chunk,
    )
