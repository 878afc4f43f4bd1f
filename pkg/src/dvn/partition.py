"""Units, per-task unit orders and the nested level masks they induce.

Units and tasks are numbered from 1. A unit owns one contiguous channel
interval on each side of every body layer; a level-``l`` mask of task ``j``
includes the first ``l`` units of that task's order together with every
interconnection block among them.

Orders follow three configuration rules:

(i)   unit ``j`` belongs to task ``j`` and forms its lowest level;
(ii)  each further level couples one adjacent, not yet coupled unit;
(iii) when two adjacent units qualify, the lower id is coupled first.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

Interval = tuple[int, int]  # half-open [start, stop)


@dataclass(frozen=True)
class UnitPartition:
    """Per body layer, ``k`` input and ``k`` output channel intervals."""

    k: int
    in_groups: tuple[tuple[Interval, ...], ...]
    out_groups: tuple[tuple[Interval, ...], ...]

    @property
    def n_layers(self) -> int:
        return len(self.out_groups)

    def in_sizes(self, r: int) -> list[int]:
        return [b - a for a, b in self.in_groups[r]]

    def out_sizes(self, r: int) -> list[int]:
        return [b - a for a, b in self.out_groups[r]]

    @classmethod
    def from_sizes(cls, sizes: Sequence[Sequence[int]], first_in: Sequence[int] | None = None):
        """Build from per-layer output group sizes; inputs follow the previous layer.

        ``first_in`` gives the input grouping of body layer 0 (the input
        layer's output); it defaults to layer 0's output sizes.
        """
        outs = [_intervals(s) for s in sizes]
        ins = [_intervals(first_in if first_in is not None else sizes[0])] + outs[:-1]
        return cls(len(sizes[0]), tuple(ins), tuple(outs))

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "in_groups": [[list(iv) for iv in layer] for layer in self.in_groups],
            "out_groups": [[list(iv) for iv in layer] for layer in self.out_groups],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UnitPartition":
        conv = lambda layers: tuple(tuple(tuple(iv) for iv in layer) for layer in layers)
        return cls(int(d["k"]), conv(d["in_groups"]), conv(d["out_groups"]))


def _intervals(sizes: Sequence[int]) -> tuple[Interval, ...]:
    edges = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    return tuple((int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]))


def split_sizes(width: int, k: int) -> list[int]:
    """Sizes as equal as possible; remainder channels go to the lowest units."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if width < k:
        raise ValueError(f"cannot split {width} channels into {k} units")
    q, rem = divmod(width, k)
    return [q + 1 if i < rem else q for i in range(k)]


def equal_partition(spec, k: int) -> UnitPartition:
    """Split every body layer's channels into ``k`` contiguous groups.

    ``spec`` is a BackboneSpec or just its list of body layers.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    body = getattr(spec, "body", spec)
    for r, layer in enumerate(body):
        if layer.in_channels < k or layer.out_channels < k:
            raise ValueError(
                f"body layer {r} has {min(layer.in_channels, layer.out_channels)} channels, fewer than k={k}"
            )
    ins = tuple(_intervals(split_sizes(layer.in_channels, k)) for layer in body)
    outs = tuple(_intervals(split_sizes(layer.out_channels, k)) for layer in body)
    return UnitPartition(k, ins, outs)


@dataclass(frozen=True)
class VirtualNetConfig:
    task_id: int
    order: tuple[int, ...]

    @property
    def n_h(self) -> int:
        return len(self.order)

    def level_of(self, unit: int) -> int:
        return self.order.index(unit) + 1


def derive_order(j: int, k: int) -> tuple[int, ...]:
    """Grow from unit ``j`` by the nearest uncoupled neighbour by unit id.

    The included set is always an id interval, so the candidates are the units
    just below and just above it; on a tie the lower id wins.
    """
    lo = hi = j
    order = [j]
    while len(order) < k:
        if lo > 1:
            lo -= 1
            order.append(lo)
        else:
            hi += 1
            order.append(hi)
    return tuple(order)


def derive_orders(k: int) -> list[VirtualNetConfig]:
    if k < 1:
        raise ValueError("k must be >= 1")
    return [VirtualNetConfig(j, derive_order(j, k)) for j in range(1, k + 1)]


def s_value(configs: Sequence[VirtualNetConfig], i: int, j: int) -> int:
    """Level at which unit ``i`` enters task ``j``'s hierarchy."""
    return _config(configs, j).level_of(i)


def s_matrix(configs: Sequence[VirtualNetConfig]) -> np.ndarray:
    """``S[j-1, i-1]``: row per task, column per unit."""
    k = len(configs[0].order)
    return np.array([[c.level_of(i) for i in range(1, k + 1)] for c in configs], dtype=int)


def inclusion_counts(configs: Sequence[VirtualNetConfig]) -> list[int]:
    """Number of loss terms (over all tasks and levels) whose mask contains each unit."""
    S = s_matrix(configs)
    n_h = configs[0].n_h
    return [int(v) for v in (n_h - S + 1).sum(axis=0)]


def _config(configs, task: int) -> VirtualNetConfig:
    for c in configs:
        if c.task_id == task:
            return c
    raise KeyError(f"no configuration for task {task}")


@dataclass(frozen=True)
class LevelMask:
    """Units and included channel selectors of one (task, level).

    ``in_index[r]`` / ``out_index[r]`` select body layer ``r``'s input and
    output channels: a slice when the union is contiguous, otherwise a sorted
    index array.
    """

    task: int
    level: int
    units: frozenset[int]
    in_index: tuple = field(repr=False)
    out_index: tuple = field(repr=False)
    in_width: tuple[int, ...] = ()
    out_width: tuple[int, ...] = ()


def _selector(intervals: Sequence[Interval], units: Sequence[int]):
    chosen = sorted(intervals[u - 1] for u in units)
    contiguous = all(a[1] == b[0] for a, b in zip(chosen, chosen[1:]))
    if contiguous:
        return slice(chosen[0][0], chosen[-1][1]), chosen[-1][1] - chosen[0][0]
    idx = np.concatenate([np.arange(a, b) for a, b in chosen])
    return idx, len(idx)


def mask_for_units(partition: UnitPartition, task: int, level: int, units) -> LevelMask:
    units = sorted(set(units))
    if not units or units[0] < 1 or units[-1] > partition.k:
        raise ValueError(f"units {units} outside 1..{partition.k}")
    ins = [_selector(partition.in_groups[r], units) for r in range(partition.n_layers)]
    outs = [_selector(partition.out_groups[r], units) for r in range(partition.n_layers)]
    return LevelMask(
        task,
        level,
        frozenset(units),
        tuple(s for s, _ in ins),
        tuple(s for s, _ in outs),
        tuple(w for _, w in ins),
        tuple(w for _, w in outs),
    )


def level_mask(partition: UnitPartition, config: VirtualNetConfig, level: int) -> LevelMask:
    if not 1 <= level <= config.n_h:
        raise ValueError(f"level {level} out of range 1..{config.n_h}")
    return mask_for_units(partition, config.task_id, level, config.order[:level])


def full_mask(partition: UnitPartition, task: int) -> LevelMask:
    """Every unit at level 1: the unpartitioned network."""
    return mask_for_units(partition, task, 1, range(1, partition.k + 1))


Hierarchy = dict  # task id -> list of LevelMask, index l-1 holds level l


def build_hierarchy(partition: UnitPartition, configs: Sequence[VirtualNetConfig]) -> Hierarchy:
    return {c.task_id: [level_mask(partition, c, l) for l in range(1, c.n_h + 1)] for c in configs}


@dataclass
class ValidationReport:
    ok: bool
    violation: str = ""

    def __bool__(self) -> bool:
        return self.ok


def validate(partition: UnitPartition, configs: Sequence[VirtualNetConfig]) -> ValidationReport:
    """Check groups, orders and nesting; report the first violation."""
    k = partition.k
    if k < 1:
        return ValidationReport(False, "k must be >= 1")
    if len(partition.in_groups) != len(partition.out_groups):
        return ValidationReport(False, "input and output groupings cover different layer counts")
    for r in range(partition.n_layers):
        for side, groups in (("input", partition.in_groups[r]), ("output", partition.out_groups[r])):
            if len(groups) != k:
                return ValidationReport(False, f"layer {r} {side}: {len(groups)} groups for k={k}")
            ivs = sorted(groups)
            if any(b - a < 1 for a, b in ivs):
                return ValidationReport(False, f"layer {r} {side}: empty unit group")
            if ivs[0][0] != 0 or any(x[1] != y[0] for x, y in zip(ivs, ivs[1:])):
                return ValidationReport(False, f"layer {r} {side}: groups not disjoint and covering")
        if r > 0 and partition.in_groups[r] != partition.out_groups[r - 1]:
            return ValidationReport(False, f"layer {r} input groups differ from layer {r - 1} outputs")
    seen_tasks = set()
    for c in configs:
        if c.task_id in seen_tasks:
            return ValidationReport(False, f"task {c.task_id} configured twice")
        seen_tasks.add(c.task_id)
        if sorted(c.order) != list(range(1, k + 1)):
            return ValidationReport(False, f"task {c.task_id}: order {c.order} is not a permutation")
        if c.order[0] != c.task_id:
            return ValidationReport(False, f"task {c.task_id}: rule (i) violated, level 1 holds unit {c.order[0]}")
        prev: frozenset[int] = frozenset()
        for l in range(1, c.n_h + 1):
            m = level_mask(partition, c, l)
            if not prev < m.units:
                return ValidationReport(False, f"task {c.task_id}: level {l} does not nest level {l - 1}")
            prev = m.units
    return ValidationReport(True)
