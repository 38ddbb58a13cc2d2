"""Confusion counts, detection metrics and streaming window detection.

The attack class is positive throughout. Metrics with a zero denominator
come back as 0 and are named in ``Metrics.degenerate`` instead of being NaN.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .can_ingest import CanMessage
from .errors import EmptyCounts, EmptyTrace, LengthMismatch, ShapeMismatch
from .graph_builder import WindowGraph, build_windows
from .model import GatModel
from .tensor import np_softmax
from .train import predict_logits

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    degenerate: tuple[str, ...] = ()


def _binary(values, name: str) -> np.ndarray:
    arr = np.asarray(values).astype(np.int64).ravel()
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0 and 1")
    return arr


def confusion(predictions: Sequence[int], labels: Sequence[int]) -> ConfusionCounts:
    p = _binary(predictions, "predictions")
    y = _binary(labels, "labels")
    if p.size != y.size:
        raise LengthMismatch(f"{p.size} predictions vs {y.size} labels")
    if p.size == 0:
        raise EmptyCounts("no prediction/label pairs")
    return ConfusionCounts(
        tp=int(np.sum((p == 1) & (y == 1))),
        tn=int(np.sum((p == 0) & (y == 0))),
        fp=int(np.sum((p == 1) & (y == 0))),
        fn=int(np.sum((p == 0) & (y == 1))),
    )


def f1_score(precision: float, recall: float) -> float:
    s = precision + recall
    return 2.0 * precision * recall / s if s > 0 else 0.0


def metrics(c: ConfusionCounts) -> Metrics:
    if c.total == 0:
        raise EmptyCounts("metrics need at least one counted pair")
    flags = []
    if c.tp + c.fp:
        precision = c.tp / (c.tp + c.fp)
    else:
        precision = 0.0
        flags.append("precision")
    if c.tp + c.fn:
        recall = c.tp / (c.tp + c.fn)
    else:
        recall = 0.0
        flags.append("recall")
    f1 = f1_score(precision, recall)
    if precision + recall == 0:
        flags.append("f1")
    return Metrics((c.tp + c.tn) / c.total, precision, recall, f1, tuple(flags))


# -- offline evaluation ---------------------------------------------------------------

@dataclass
class EvalReport:
    counts: ConfusionCounts
    metrics: Metrics
    threshold: float
    num_graphs: int
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "counts": asdict(self.counts),
            "metrics": {**asdict(self.metrics), "degenerate": list(self.metrics.degenerate)},
            "threshold": self.threshold,
            "num_graphs": self.num_graphs,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        m, c = self.metrics, self.counts
        rows = [
            ("accuracy", f"{m.accuracy:.4f}"),
            ("precision", f"{m.precision:.4f}" + (" (degenerate)" if "precision" in m.degenerate else "")),
            ("recall", f"{m.recall:.4f}" + (" (degenerate)" if "recall" in m.degenerate else "")),
            ("f1", f"{m.f1:.4f}"),
            ("tp / tn", f"{c.tp} / {c.tn}"),
            ("fp / fn", f"{c.fp} / {c.fn}"),
            ("windows", str(self.num_graphs)),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows) + "\n"


def attack_probability(model: GatModel, graphs: Sequence[WindowGraph], batch_size: int = 128) -> np.ndarray:
    logits = predict_logits(model, graphs, batch_size)
    return np_softmax(logits, axis=1)[:, 1] if len(logits) else np.zeros(0)


def clamp_threshold(threshold: float) -> float:
    if np.isnan(threshold):
        raise ValueError("threshold is NaN")
    return float(min(1.0, max(0.0, threshold)))


def evaluate_model(model: GatModel, graphs: Sequence[WindowGraph], threshold: float = DEFAULT_THRESHOLD,
                   batch_size: int = 128, meta: dict | None = None) -> EvalReport:
    if not graphs:
        raise EmptyCounts("no graphs to evaluate")
    threshold = clamp_threshold(threshold)
    prob = attack_probability(model, graphs, batch_size)
    pred = (prob >= threshold).astype(int)
    counts = confusion(pred, [g.label for g in graphs])
    return EvalReport(counts, metrics(counts), threshold, len(graphs), dict(meta or {}))


# -- streaming detection --------------------------------------------------------------

@dataclass(frozen=True)
class Detection:
    window_index: int
    start_ts: float
    end_ts: float
    prob: float
    verdict: int


DETECTION_COLUMNS = ["window_index", "start_ts", "end_ts", "prob", "verdict"]


def detect_stream(model: GatModel, messages: Sequence[CanMessage], window: int = 50, stride: int = 50,
                  threshold: float = DEFAULT_THRESHOLD, batch_size: int = 128) -> list[Detection]:
    """Score every complete window of the trace, in window order."""
    if len(messages) == 0:
        raise EmptyTrace("no messages to scan")
    if model.arch.in_dim != 3:
        raise ShapeMismatch(f"model expects {model.arch.in_dim} node features, window graphs carry 3")
    threshold = clamp_threshold(threshold)
    model.eval()
    t0 = time.perf_counter()
    graphs = build_windows(messages, window, stride)
    prob = attack_probability(model, graphs, batch_size)
    elapsed = time.perf_counter() - t0
    # Throughput is logged only; writing it to files would break byte-identical reruns.
    if graphs:
        log.info("scored %d windows in %.3fs (%.1f windows/s)", len(graphs), elapsed,
                 len(graphs) / max(elapsed, 1e-9))
    out = []
    for k, (g, p) in enumerate(zip(graphs, prob)):
        s = g.window_start_index
        out.append(Detection(k, messages[s].timestamp, messages[s + window - 1].timestamp,
                             float(p), int(p >= threshold)))
    return out


def write_detections(path: Path | str, detections: Sequence[Detection], comment: str | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DETECTION_COLUMNS)
        for d in detections:
            w.writerow([d.window_index, f"{d.start_ts:.6f}", f"{d.end_ts:.6f}", repr(d.prob), d.verdict])


def read_detections(path: Path | str) -> list[Detection]:
    with open(path, encoding="utf-8") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    if not rows or rows[0] != DETECTION_COLUMNS:
        raise ValueError(f"{path}: missing detection header")
    return [Detection(int(r[0]), float(r[1]), float(r[2]), float(r[3]), int(r[4])) for r in rows[1:]]
