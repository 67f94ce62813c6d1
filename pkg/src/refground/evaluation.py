"""Benchmark harness: IoU, Prec@1, and the partition/proposal/aggregation grid.

The report mirrors the shape of a comprehension-accuracy table: one row per
(partition, proposal mode, aggregation) cell, with per-expression-kind
breakdowns, pruning counts, and latency statistics.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import pipeline as pipeline_mod
from .pipeline import GroundingEngine
from .scene import BoundingBox, SceneRecord, box_iou, make_proposals
from .vocab import contains_noun, load_noun_lexicon, tokenize

IOU_THRESHOLD = 0.5
PROPOSAL_MODES = ("ground_truth", "degraded")
AGGREGATIONS = ("noisy_or", "max")
EXPRESSION_KINDS = ("semantic_only", "spatio_semantic")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; see scene.box_iou."""
    return box_iou(a, b)


def prec_at_1(results: list[tuple[BoundingBox, BoundingBox]],
              threshold: float = IOU_THRESHOLD) -> float:
    """Fraction of (predicted, ground-truth) pairs with IoU strictly above
    the threshold."""
    if not results:
        raise ValueError("cannot compute precision over an empty result list")
    hits = sum(1 for pred, truth in results if iou(pred, truth) > threshold)
    return hits / len(results)


@dataclass
class CellResult:
    correct: int = 0
    evaluated: int = 0
    pruned: int = 0
    failed: int = 0
    kind_correct: dict[str, int] = field(default_factory=dict)
    kind_evaluated: dict[str, int] = field(default_factory=dict)

    @property
    def prec_at_1(self) -> float:
        return self.correct / self.evaluated if self.evaluated else 0.0

    def kind_prec(self, kind: str) -> float:
        n = self.kind_evaluated.get(kind, 0)
        return self.kind_correct.get(kind, 0) / n if n else 0.0

    def record(self, kind: str, correct: bool) -> None:
        self.evaluated += 1
        self.kind_evaluated[kind] = self.kind_evaluated.get(kind, 0) + 1
        if correct:
            self.correct += 1
            self.kind_correct[kind] = self.kind_correct.get(kind, 0) + 1


@dataclass
class BenchmarkReport:
    cells: dict[tuple[str, str, str], CellResult]
    latencies_ms: list[float] = field(default_factory=list)
    threshold: float = IOU_THRESHOLD

    def cell(self, partition: str, proposals: str, aggregation: str) -> CellResult:
        return self.cells[(partition, proposals, aggregation)]

    def timing_summary(self) -> dict:
        if not self.latencies_ms:
            return {"queries": 0}
        arr = np.array(self.latencies_ms)
        return {
            "queries": int(arr.size),
            "mean_ms": float(arr.mean()),
            "p50_ms": float(np.percentile(arr, 50)),
            "p95_ms": float(np.percentile(arr, 95)),
            "max_ms": float(arr.max()),
        }

    def to_dict(self, include_timing: bool = False) -> dict:
        """JSON form; timing is volatile and excluded unless asked for."""
        rows = []
        for (partition, proposals, aggregation) in sorted(self.cells):
            cell = self.cells[(partition, proposals, aggregation)]
            rows.append({
                "partition": partition,
                "proposals": proposals,
                "aggregation": aggregation,
                "prec_at_1": cell.prec_at_1,
                "by_kind": {k: cell.kind_prec(k) for k in EXPRESSION_KINDS
                            if cell.kind_evaluated.get(k)},
                "evaluated": cell.evaluated,
                "correct": cell.correct,
                "pruned": cell.pruned,
                "failed": cell.failed,
            })
        out = {
            "format_version": 1,
            "iou_threshold": self.threshold,
            "cells": rows,
        }
        if include_timing:
            out["timing"] = self.timing_summary()
        return out

    def text_table(self) -> str:
        """Aligned comprehension-score table (percentages)."""
        partitions = sorted({key[0] for key in self.cells})
        label = {"noisy_or": "Noisy-Or", "max": "Max"}
        lines = [
            "Comprehension Prec@1 Scores (%)",
            "=" * 78,
            f"{'':12s}{'':10s}{'GT Proposals':>26s}  {'Degraded Proposals':>26s}",
            f"{'Partition':12s}{'Method':10s}"
            + f"{'overall':>10s}{'sem':>8s}{'spa':>8s}  "
            + f"{'overall':>10s}{'sem':>8s}{'spa':>8s}",
            "-" * 78,
        ]
        for partition in partitions:
            for aggregation in AGGREGATIONS:
                row = f"{partition:12s}{label[aggregation]:10s}"
                for proposals in PROPOSAL_MODES:
                    cell = self.cells.get((partition, proposals, aggregation))
                    if cell is None:
                        row += f"{'-':>10s}{'-':>8s}{'-':>8s}  "
                        continue
                    row += (f"{100 * cell.prec_at_1:>10.1f}"
                            f"{100 * cell.kind_prec('semantic_only'):>8.1f}"
                            f"{100 * cell.kind_prec('spatio_semantic'):>8.1f}  ")
                lines.append(row.rstrip())
            lines.append("-" * 78)
        total_eval = sum(c.evaluated for c in self.cells.values())
        total_pruned = sum(c.pruned for c in self.cells.values())
        total_failed = sum(c.failed for c in self.cells.values())
        lines.append(f"expressions evaluated: {total_eval}  pruned (no noun): "
                     f"{total_pruned}  failures: {total_failed}")
        timing = self.timing_summary()
        if timing.get("queries"):
            lines.append(
                f"latency per query: mean {timing['mean_ms']:.1f} ms, "
                f"p50 {timing['p50_ms']:.1f} ms, p95 {timing['p95_ms']:.1f} ms, "
                f"max {timing['max_ms']:.1f} ms over {timing['queries']} queries")
        return "\n".join(lines) + "\n"


def classify_test_partitions(records: list[SceneRecord]) -> dict[str, list[SceneRecord]]:
    """Split held-out scenes into duplicate-heavy (test_a) vs diverse (test_b)."""
    test_a, test_b = [], []
    for record in records:
        triples = [o.attributes for o in record.scene.objects]
        duplicated = sum(1 for t in triples if triples.count(t) > 1)
        (test_a if duplicated >= 3 else test_b).append(record)
    return {"test_a": test_a, "test_b": test_b}


def _proposal_seed(scene_id: str, base_seed: int) -> int:
    return zlib.crc32(scene_id.encode("utf-8")) ^ base_seed


def run_benchmark(engine: GroundingEngine,
                  partitions: dict[str, list[SceneRecord]],
                  proposal_modes=PROPOSAL_MODES,
                  aggregations=AGGREGATIONS,
                  noun_lexicon: set[str] | None = None,
                  proposal_seed: int = 1234,
                  threshold: float = IOU_THRESHOLD) -> BenchmarkReport:
    """Evaluate every (partition, proposal mode, aggregation) cell.

    Expressions without a lexicon noun are pruned before evaluation; engine
    errors are counted as failures for their cell and never abort the run.
    """
    if not partitions or not any(partitions.values()):
        raise ValueError("benchmark needs at least one non-empty partition")
    noun_lexicon = noun_lexicon or load_noun_lexicon()
    cells = {(p, m, a): CellResult()
             for p in partitions for m in proposal_modes for a in aggregations}
    report = BenchmarkReport(cells=cells, threshold=threshold)

    for partition, records in partitions.items():
        for record in records:
            scene = record.scene
            kept = []
            pruned = 0
            for expr in record.expressions:
                if contains_noun(tokenize(expr.text), noun_lexicon):
                    kept.append(expr)
                else:
                    pruned += 1
            if pruned:
                for mode in proposal_modes:
                    for aggregation in aggregations:
                        cells[(partition, mode, aggregation)].pruned += pruned
            if not kept:
                continue
            for mode in proposal_modes:
                proposals = make_proposals(scene, mode,
                                           seed=_proposal_seed(scene.id, proposal_seed))
                for aggregation in aggregations:
                    cell = cells[(partition, mode, aggregation)]
                    for expr in kept:
                        truth = scene.object_by_id(expr.target_object_id).bbox
                        start = time.perf_counter()
                        try:
                            result = pipeline_mod.ground(engine, scene, proposals,
                                                         expr.text, aggregation)
                        except Exception:  # noqa: BLE001 - counted, not fatal
                            cell.failed += 1
                            cell.record(expr.kind, correct=False)
                            continue
                        finally:
                            report.latencies_ms.append(
                                1000.0 * (time.perf_counter() - start))
                        predicted = result.ranked[0].box
                        cell.record(expr.kind,
                                    correct=iou(predicted, truth) > threshold)
    return report
