"""Parameter accounting, measured latency and budget-driven level selection."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .backbone import BackboneSpec, ModelParams, forward_logits
from .partition import Hierarchy, LevelMask


class BudgetError(ValueError):
    pass


def count_params(spec: BackboneSpec, mask: LevelMask, scope: str = "body", bias: bool = True) -> int:
    """Entries of the weight blocks a (task, level) network uses.

    Body scope: per layer |in| * |out| * kernel area (+ |out| biases), which
    covers the diagonal unit blocks and every interconnection block among the
    included units. Total scope adds the input-layer columns feeding the
    included channels, the (task, level) head, and the norm scales/shifts.
    """
    if scope not in ("body", "total"):
        raise ValueError(f"scope must be 'body' or 'total', not {scope!r}")
    n = 0
    for r, layer in enumerate(spec.body):
        cin, cout = mask.in_width[r], mask.out_width[r]
        n += cin * cout * layer.kernel_area + (cout if bias else 0)
    if scope == "body":
        return n
    task = mask.task
    first = spec.input_layers[task]
    c0 = mask.in_width[0]
    n += first.in_channels * c0 * first.kernel_area + (c0 if bias else 0)
    classes = spec.task(task).classes
    n += mask.out_width[-1] * classes + (classes if bias else 0)
    if first.norm:
        n += 2 * c0
    n += sum(2 * mask.out_width[r] for r, layer in enumerate(spec.body) if layer.norm)
    return n


def full_body_count(spec: BackboneSpec, bias: bool = True) -> int:
    return sum(l.in_channels * l.out_channels * l.kernel_area + (l.out_channels if bias else 0) for l in spec.body)


@dataclass
class BudgetRow:
    task: int
    level: int
    units: tuple[int, ...]
    body_params: int
    total_params: int
    density: float
    compression: float
    latency: float | None = None
    accuracy: float | None = None

    FIELDS = ("task", "level", "units", "body_params", "total_params", "density", "compression",
              "latency_s", "accuracy")

    def as_tuple(self):
        return (self.task, self.level, "-".join(map(str, self.units)), self.body_params, self.total_params,
                self.density, self.compression, self.latency, self.accuracy)


@dataclass
class BudgetReport:
    rows: list[BudgetRow] = field(default_factory=list)

    def for_task(self, task: int) -> list[BudgetRow]:
        return sorted((r for r in self.rows if r.task == task), key=lambda r: r.level)

    def to_csv(self, latency: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        fields = [f for f in BudgetRow.FIELDS if latency or f != "latency_s"]
        w.writerow(fields)
        for r in self.rows:
            row = dict(zip(BudgetRow.FIELDS, r.as_tuple()))
            w.writerow(["" if row[f] is None else _fmt(row[f]) for f in fields])
        return buf.getvalue()

    def pretty(self) -> str:
        head = f"{'task':>4} {'lvl':>3} {'units':<10} {'body':>8} {'total':>8} {'density':>8} {'compr':>7} {'lat(ms)':>8} {'acc':>6}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lat = "" if r.latency is None else f"{1e3 * r.latency:8.3f}"
            acc = "" if r.accuracy is None else f"{r.accuracy:6.3f}"
            units = "-".join(map(str, r.units))
            lines.append(f"{r.task:>4} {r.level:>3} {units:<10} {r.body_params:>8} {r.total_params:>8} "
                         f"{r.density:>8.4f} {r.compression:>7.3f} {lat:>8} {acc:>6}")
        return "\n".join(lines)


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def measure_latency(params: ModelParams, spec: BackboneSpec, mask: LevelMask, sample: np.ndarray,
                    runs: int = 1000, warmup: int = 100) -> float:
    """Mean wall-clock seconds of one eval-mode single-sample forward."""
    x = sample[None] if sample.shape == tuple(spec.task(mask.task).input_shape) else sample
    for _ in range(warmup):
        forward_logits(params, spec, mask, x)
    t0 = time.perf_counter()
    for _ in range(runs):
        forward_logits(params, spec, mask, x)
    return (time.perf_counter() - t0) / runs


def measure_level_latencies(params: ModelParams, spec: BackboneSpec, masks: Sequence[LevelMask],
                            sample: np.ndarray, runs: int = 1000, warmup: int = 100,
                            rounds: int = 10) -> list[float]:
    """Mean forward seconds per mask, timed round-robin in ``rounds`` chunks.

    Interleaving spreads slow drift in machine load over every mask instead of
    letting it land on whichever one happened to be timed at the time.
    """
    x = sample[None] if sample.shape == tuple(spec.task(masks[0].task).input_shape) else sample
    for m in masks:
        for _ in range(warmup):
            forward_logits(params, spec, m, x)
    chunks = [runs // rounds + (r < runs % rounds) for r in range(rounds)]
    total = [0.0] * len(masks)
    for n in chunks:
        for i, m in enumerate(masks):
            t0 = time.perf_counter()
            for _ in range(n):
                forward_logits(params, spec, m, x)
            total[i] += time.perf_counter() - t0
    return [t / runs for t in total]


def budget_table(spec: BackboneSpec, hierarchy: Hierarchy, params: ModelParams | None = None,
                 samples: dict[int, np.ndarray] | None = None, accuracy: dict | None = None,
                 runs: int = 1000, warmup: int = 100, density_bias: bool = True) -> BudgetReport:
    """One row per (task, level). Latency is measured only when ``params`` is given."""
    full = full_body_count(spec, bias=density_bias)
    rows = []
    rng = np.random.default_rng(0)
    for task in sorted(hierarchy):
        latency = [None] * len(hierarchy[task])
        if params is not None:
            shape = spec.task(task).input_shape
            sample = samples[task] if samples and task in samples else rng.standard_normal(shape)
            latency = measure_level_latencies(params, spec, hierarchy[task], sample, runs, warmup)
        for m, lat in zip(hierarchy[task], latency):
            body = count_params(spec, m, "body", bias=density_bias)
            density = body / full
            rows.append(BudgetRow(
                task, m.level, tuple(sorted(m.units)),
                count_params(spec, m, "body"), count_params(spec, m, "total"),
                density, 1.0 / density,
                lat,
                None if accuracy is None else accuracy.get((task, m.level)),
            ))
    return BudgetReport(rows)


def select_level(report: BudgetReport, task: int, max_params: int, scope: str = "total") -> int:
    """Largest level whose parameter count fits within ``max_params`` (inclusive)."""
    rows = report.for_task(task)
    if not rows:
        raise KeyError(f"no budget rows for task {task}")
    count = (lambda r: r.total_params) if scope == "total" else (lambda r: r.body_params)
    if max_params < count(rows[0]):
        raise BudgetError(
            f"budget {max_params} is below the level-1 count of {count(rows[0])} parameters for task {task}"
        )
    return max(r.level for r in rows if count(r) <= max_params)


def select_from_counts(counts: Sequence[int], max_params: int) -> int:
    """Level (1-based) for a plain list of increasing per-level counts."""
    if max_params < counts[0]:
        raise BudgetError(f"budget {max_params} is below the level-1 count of {counts[0]} parameters")
    return max(l + 1 for l, c in enumerate(counts) if c <= max_params)
