"""Error statistics, the residual ablation and the inference benchmark.

Errors are signed ``prediction - truth`` components in world units. The
standard deviation of a quantity is the population std of all its component
errors pooled over frames and axes; the maximum is the largest absolute
component error. Sums use ``math.fsum`` so the result does not depend on the
order samples were evaluated in.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .scene import Dataset, assemble_batch, target_length

QUANTITIES = ("coordinate", "velocity", "acceleration")
AXES = ("X", "Y", "Z")
REPORT_HEADER = ["quantity", "axis", "std", "max", "mean", "n"]


def quantity_columns(frames: int) -> dict[str, np.ndarray]:
    """Column indices of each quantity in a target vector."""
    target_length(frames)
    out = {"coordinate": np.arange(3 * frames)}
    if frames >= 2:
        out["velocity"] = 3 * frames + np.arange(3 * (frames - 1))
    if frames == 3:
        out["acceleration"] = np.arange(15, 18)
    return out


@dataclass
class ErrorStats:
    quantity: str
    axis: str   # "all", "X", "Y" or "Z"
    std: float
    max: float
    mean: float
    n: int


def _stats(quantity: str, axis: str, e: np.ndarray) -> ErrorStats:
    flat = [float(v) for v in np.ravel(e)]
    n = len(flat)
    mean = math.fsum(flat) / n
    var = math.fsum((v - mean) ** 2 for v in flat) / n
    return ErrorStats(quantity, axis, math.sqrt(var), max(abs(v) for v in flat), mean, n)


@dataclass
class EvalReport:
    rows: list[ErrorStats]
    samples: int = 0
    ms_per_measurement: float | None = None

    def get(self, quantity: str, axis: str = "all") -> ErrorStats:
        for r in self.rows:
            if r.quantity == quantity and r.axis == axis:
                return r
        raise KeyError((quantity, axis))

    def quantities(self) -> list[str]:
        return [q for q in QUANTITIES if any(r.quantity == q for r in self.rows)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in self.rows:
            w.writerow([r.quantity, r.axis, repr(r.std), repr(r.max), repr(r.mean), r.n])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if header != REPORT_HEADER:
            raise ValueError(f"unexpected report header {header}")
        rows = [ErrorStats(q, a, float(s), float(m), float(mu), int(n)) for q, a, s, m, mu, n in reader]
        samples = 0
        if rows:
            frames = len({r.quantity for r in rows})
            samples = rows[0].n // (3 * frames)
        return cls(rows, samples)


def error_report(pred: np.ndarray, truth: np.ndarray, frames: int) -> EvalReport:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.shape[1] != target_length(frames):
        raise ValueError(f"prediction {pred.shape} / truth {truth.shape} do not fit {frames} frames")
    err = pred - truth
    rows = []
    for q, cols in quantity_columns(frames).items():
        e = err[:, cols].reshape(len(err), -1, 3)
        rows.append(_stats(q, "all", e))
        rows.extend(_stats(q, ax, e[..., i]) for i, ax in enumerate(AXES))
    return EvalReport(rows, samples=len(err))


def predict_dataset(predict: Callable[[np.ndarray], np.ndarray], dataset: Dataset, frames: int,
                    seed: int = 0, batch_size: int = 32):
    """Run ``predict`` over samples assembled exactly as in training.

    Returns (predictions, truth, model seconds).
    """
    rng = np.random.default_rng(seed)
    preds, truths = [], []
    elapsed = 0.0
    n = len(dataset)
    for lo in range(0, n, batch_size):
        images, truth = assemble_batch(dataset, np.arange(lo, min(lo + batch_size, n)), rng, frames)
        t0 = time.perf_counter()
        preds.append(np.asarray(predict(images), dtype=np.float64))
        elapsed += time.perf_counter() - t0
        truths.append(truth)
    return np.concatenate(preds), np.concatenate(truths), elapsed


def _predictor(model, residual: bool):
    if callable(model) and not hasattr(model, "predict"):
        return model
    return lambda images: model.predict(images, residual=residual)


def evaluate(model, dataset: Dataset, seed: int = 0, frames: int | None = None,
             residual: bool = True, batch_size: int = 32) -> EvalReport:
    """Error report of ``model`` on ``dataset``.

    ``model`` is a ``network.Model`` or any callable mapping uint8 images
    [N, 2, T, H, W] to world-unit targets (then ``frames`` is required).
    """
    if frames is None:
        frames = model.config.frames
    if hasattr(model, "config") and model.config.frames != frames:
        raise ValueError(f"model is built for {model.config.frames} frames, not {frames}")
    pred, truth, secs = predict_dataset(_predictor(model, residual), dataset, frames, seed, batch_size)
    report = error_report(pred, truth, frames)
    report.ms_per_measurement = 1000.0 * secs / max(len(pred), 1)
    return report


@dataclass
class AblationReport:
    with_residual: EvalReport
    without_residual: EvalReport
    reduction_pct: dict[str, float] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["quantity", "std_residual", "std_no_residual", "reduction_pct"])
        for q in self.with_residual.quantities():
            a = self.with_residual.get(q).std
            b = self.without_residual.get(q).std
            w.writerow([q, repr(a), repr(b), repr(self.reduction_pct.get(q, 0.0))])
        return buf.getvalue()


def reduction_pct(with_res: float, without_res: float) -> float:
    """How much the residual path lowered a std, in percent of the plain value."""
    if without_res == 0:
        return 0.0
    return 100.0 * (without_res - with_res) / without_res


def ablate_residual(model, dataset: Dataset, seed: int = 0) -> AblationReport:
    """Evaluate with and without the residual heads on identical samples."""
    a = evaluate(model, dataset, seed, residual=True)
    b = evaluate(model, dataset, seed, residual=False)
    deltas = {q: reduction_pct(a.get(q).std, b.get(q).std) for q in a.quantities() if q != "coordinate"}
    return AblationReport(a, b, deltas)


@dataclass
class BenchResult:
    mean_ms: float
    p95_ms: float
    durations_ms: list[float]

    @property
    def throughput(self) -> float:
        return 1000.0 / self.mean_ms

    def to_csv(self) -> str:
        return ("n,mean_ms,p95_ms,per_second\n"
                f"{len(self.durations_ms)},{self.mean_ms!r},{self.p95_ms!r},{self.throughput!r}\n")


def benchmark_inference(model, images: np.ndarray, n: int | None = None, warmup: int = 1) -> BenchResult:
    """Time single-sample forward passes on pre-rendered uint8 images [M, 2, T, H, W]."""
    n = len(images) if n is None else n
    if n < 1:
        raise ValueError("benchmark needs at least one measurement")
    for i in range(warmup):
        model.predict(images[i % len(images)][None])
    durations = []
    for i in range(n):
        x = images[i % len(images)][None]
        t0 = time.perf_counter()
        model.predict(x)
        durations.append(1000.0 * (time.perf_counter() - t0))
    return BenchResult(math.fsum(durations) / n, float(np.percentile(durations, 95)), durations)
