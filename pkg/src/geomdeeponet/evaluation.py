"""Error metrics, case ranking, error-vs-similarity regression and timing fits."""

from __future__ import annotations

import csv
import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import DimensionError, RegressionError, UsageError

PathLike = Union[str, Path]

MASK_TAU = 1e-8
PERCENTILES = {"best": 0, "50th": 50, "70th": 70, "75th": 75, "80th": 80, "90th": 90, "worst": 100}


@dataclass
class CaseMetrics:
    """Per-case errors. ``rel_error`` is in percent; ``None`` marks a
    component whose ground truth is entirely masked."""

    case_id: str
    mae: list
    rel_error: list
    rel_l2: list
    node_count: int
    masked: list
    wall_time: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def case_metrics(pred, truth, case_id: str = "", wall_time: Optional[float] = None,
                 tau: float = MASK_TAU) -> CaseMetrics:
    """MAE, masked mean relative error (%) and relative L2 per component."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction {pred.shape} vs truth {truth.shape}")
    if pred.ndim == 1:
        pred, truth = pred[:, None], truth[:, None]
    if pred.ndim != 2 or pred.shape[0] == 0:
        raise DimensionError(f"expected (n, c) arrays with n >= 1, got {pred.shape}")
    err = np.abs(truth - pred)
    mae = err.mean(axis=0)
    scale = np.abs(truth).max(axis=0)
    rel, masked, l2 = [], [], []
    for k in range(truth.shape[1]):
        keep = np.abs(truth[:, k]) > tau * scale[k]
        masked.append(int((~keep).sum()))
        if keep.any():
            rel.append(float(np.mean(err[keep, k] / np.abs(truth[keep, k])) * 100.0))
        else:
            rel.append(None)
        norm = math.sqrt(float(truth[:, k] @ truth[:, k]))
        l2.append(float(np.sqrt(err[:, k] @ err[:, k]) / norm) if norm > 0 else None)
    return CaseMetrics(case_id, mae.tolist(), rel, l2, int(truth.shape[0]), masked, wall_time)


def _nanmean(values) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def nearest_rank(sorted_values: Sequence, q: float) -> int:
    """0-based index of the nearest-rank ``q``-th percentile (q in [0, 100])."""
    n = len(sorted_values)
    if n == 0:
        raise UsageError("empty ranking")
    if q <= 0:
        return 0
    return min(n, max(1, math.ceil(q / 100.0 * n))) - 1


@dataclass
class EvalReport:
    cases: list
    grouping: str
    mean_mae: list
    mean_rel_error: list
    mean_rel_l2: list
    percentiles: dict
    mask_tau: float = MASK_TAU
    aggregation: str = "per-case mean, then equal-weight mean over cases"
    similarity_regression: Optional[dict] = None
    timing: Optional[dict] = None
    config: Optional[dict] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cases"] = [c.to_dict() if isinstance(c, CaseMetrics) else c for c in self.cases]
        return d

    def write_json(self, path: PathLike):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    def write_csv(self, path: PathLike):
        c = len(self.mean_mae)
        header = ["case_id", "node_count"] + [f"mae_{k + 1}" for k in range(c)] \
            + [f"rel_error_pct_{k + 1}" for k in range(c)] + [f"rel_l2_{k + 1}" for k in range(c)]
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for m in self.cases:
                row = [m.case_id, m.node_count, *m.mae,
                       *["" if v is None else v for v in m.rel_error],
                       *["" if v is None else v for v in m.rel_l2]]
                w.writerow(row)


def aggregate(metrics: Sequence[CaseMetrics], grouping: str = "full_mesh") -> EvalReport:
    """Equal-weight means over cases and a nearest-rank table by first-component MAE."""
    if len(metrics) == 0:
        raise UsageError("aggregate needs at least one case")
    if grouping not in ("subset", "full_mesh"):
        raise UsageError(f"grouping must be 'subset' or 'full_mesh', got {grouping!r}")
    c = len(metrics[0].mae)
    if any(len(m.mae) != c for m in metrics):
        raise DimensionError("cases disagree on the number of components")
    mean_mae = [float(np.mean([m.mae[k] for m in metrics])) for k in range(c)]
    mean_rel = [_nanmean(m.rel_error[k] for m in metrics) for k in range(c)]
    mean_l2 = [_nanmean(m.rel_l2[k] for m in metrics) for k in range(c)]
    ranked = sorted(metrics, key=lambda m: (m.mae[0], m.case_id))
    table = {}
    for name, q in PERCENTILES.items():
        r = nearest_rank(ranked, q)
        table[name] = {"rank": r + 1, "case_id": ranked[r].case_id, "mae": ranked[r].mae[0]}
    return EvalReport(list(metrics), grouping, mean_mae, mean_rel, mean_l2, table)


def global_rel_l2(preds: Sequence[np.ndarray], truths: Sequence[np.ndarray]) -> float:
    """sqrt(sum |pred - truth|^2 / sum |truth|^2) pooled over every node of every case."""
    num = sum(float(np.sum((np.asarray(p) - np.asarray(t)) ** 2)) for p, t in zip(preds, truths))
    den = sum(float(np.sum(np.asarray(t) ** 2)) for t in truths)
    if den == 0:
        raise UsageError("ground truth is identically zero")
    return math.sqrt(num / den)


# ---------------------------------------------------------------------------
# regression


def ols(x, y) -> tuple[float, float]:
    """Least-squares line ``y = slope * x + intercept``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError(f"ols needs equal 1-d inputs, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise RegressionError(f"need at least 2 points, got {len(x)}")
    xm, ym = x.mean(), y.mean()
    dx = x - xm
    sxx = float(dx @ dx)
    if sxx <= 0 or sxx <= 1e-24 * max(1.0, float(np.abs(x).max()) ** 2) * len(x):
        raise RegressionError("all regressor values are equal; slope undefined")
    slope = float(dx @ (y - ym)) / sxx
    return slope, float(ym - slope * xm)


def similarity_regression(metrics: Sequence[CaseMetrics], similarities) -> tuple[float, float]:
    """(slope, intercept) of first-component case MAE against similarity to the reference."""
    s = np.asarray(similarities, dtype=np.float64)
    if len(s) != len(metrics):
        raise DimensionError(f"{len(metrics)} cases but {len(s)} similarities")
    return ols(s, [m.mae[0] for m in metrics])


# ---------------------------------------------------------------------------
# timing


@dataclass
class TimingRecord:
    node_count: int
    median_seconds: float
    repeats: int
    excluded: bool = False


@dataclass
class TimingReport:
    records: list = field(default_factory=list)
    exponent: Optional[float] = None
    log_intercept: Optional[float] = None
    timer_resolution: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def timer_resolution() -> float:
    info = time.get_clock_info("perf_counter")
    return float(info.resolution)


def power_law_fit(n, t) -> tuple[float, float]:
    """Exponent and log-intercept of ``t = a * n**p`` by log-log least squares."""
    n = np.asarray(n, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if np.any(n <= 0) or np.any(t <= 0):
        raise UsageError("power-law fit needs positive sizes and times")
    return ols(np.log(n), np.log(t))


def timing_benchmark(predict: Callable[[int], object], node_counts: Sequence[int], repeats: int = 3,
                     clock: Callable[[], float] = time.perf_counter,
                     resolution: Optional[float] = None) -> TimingReport:
    """Median-of-``repeats`` wall time of ``predict(n)`` for each node count.

    Timings below 100x the timer resolution are excluded with a warning. The
    exponent is only fitted when at least two sizes survive.
    """
    if repeats < 1:
        raise UsageError("repeats must be >= 1")
    res = timer_resolution() if resolution is None else resolution
    report = TimingReport(timer_resolution=res)
    for n in node_counts:
        times = []
        for _ in range(repeats):
            t0 = clock()
            predict(int(n))
            times.append(clock() - t0)
        med = float(np.median(times))
        rec = TimingRecord(int(n), med, repeats)
        if med <= 100.0 * res:
            rec.excluded = True
            warnings.warn(f"timing for n={n} ({med:.3g} s) is within timer resolution; excluded",
                          RuntimeWarning, stacklevel=2)
        report.records.append(rec)
    kept = [r for r in report.records if not r.excluded]
    if len({r.node_count for r in kept}) >= 2:
        report.exponent, report.log_intercept = power_law_fit(
            [r.node_count for r in kept], [r.median_seconds for r in kept])
    return report


# ---------------------------------------------------------------------------
# model evaluation


def evaluate_model(model, cases, grouping: str = "full_mesh") -> tuple[EvalReport, list]:
    """Predict every case node-by-node-count (one case at a time) and aggregate."""
    metrics, preds = [], []
    for case in cases:
        t0 = time.perf_counter()
        p = model.predict_case(case)
        dt = time.perf_counter() - t0
        preds.append(p)
        metrics.append(case_metrics(p, case.fields, case.id, dt))
    return aggregate(metrics, grouping), preds
