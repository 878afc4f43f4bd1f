"""Synthetic task generators and the on-disk dataset format.

A dataset is a JSON manifest plus a flat binary: features as float64 LE in
sample-major order, then labels as int32 LE. ``save(path)`` writes
``<path>.json`` and ``<path>.bin``.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


@dataclass
class DatasetFile:
    task_id: int
    classes: int
    x: np.ndarray  # (n, *feature_shape), float64
    y: np.ndarray  # (n,), int32
    seed: int = 0
    generator: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int32)
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError(f"{self.x.shape[0]} samples but {self.y.shape[0]} labels")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])

    def __len__(self) -> int:
        return int(self.y.shape[0])

    def manifest(self) -> dict:
        return {
            "task_id": self.task_id,
            "classes": self.classes,
            "feature_shape": list(self.feature_shape),
            "samples": len(self),
            "seed": self.seed,
            "generator": self.generator,
            "params": self.params,
        }

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        payload = np.ascontiguousarray(self.x, dtype="<f8").tobytes()
        payload += np.ascontiguousarray(self.y, dtype="<i4").tobytes()
        _atomic_write(path.with_suffix(".bin"), payload)
        _atomic_write(path.with_suffix(".json"), json.dumps(self.manifest(), indent=1).encode())
        return path.with_suffix(".json")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetFile":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        raw = path.with_suffix(".bin").read_bytes()
        n, shape = int(meta["samples"]), tuple(meta["feature_shape"])
        fsize = int(np.prod(shape, dtype=int))
        expect = n * fsize * 8 + n * 4
        if len(raw) != expect:
            raise ValueError(f"{path}: binary is {len(raw)} bytes, manifest implies {expect}")
        x = np.frombuffer(raw, dtype="<f8", count=n * fsize).reshape((n, *shape))
        y = np.frombuffer(raw, dtype="<i4", offset=n * fsize * 8, count=n)
        return cls(
            int(meta["task_id"]), int(meta["classes"]), x.astype(np.float64), y.astype(np.int32),
            int(meta.get("seed", 0)), meta.get("generator", ""), meta.get("params", {}),
        )


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _split(x, y, classes, per_class, train_frac):
    """Deterministic interleaved split; samples are stored class-major in ``x``.

    Within each class, sample ``s`` goes to train iff floor((s+1)f) > floor(sf),
    which spreads the test samples evenly. Outputs interleave the classes.
    """
    f = Fraction(train_frac).limit_denominator(10_000)
    s = np.arange(per_class)
    is_train = ((s + 1) * f.numerator // f.denominator) > (s * f.numerator // f.denominator)
    order_tr = [c * per_class + i for i in s[is_train] for c in range(classes)]
    order_te = [c * per_class + i for i in s[~is_train] for c in range(classes)]
    return (x[order_tr], y[order_tr]), (x[order_te], y[order_te])


def lattice_means(classes: int, dim: int, seed: int, spacing: float = 1.0) -> np.ndarray:
    """Class means on a centered integer lattice; the site-to-class map depends on ``seed``."""
    side = 2
    while side**dim < classes:
        side += 1
    rng = np.random.default_rng(seed)
    sites = rng.permutation(side**dim)[:classes]
    coords = np.array([np.unravel_index(s, (side,) * dim) for s in sites], dtype=np.float64)
    return spacing * (coords - (side - 1) / 2.0)


def gen_blobs(
    classes: int,
    samples_per_class: int,
    dim: int,
    spread: float,
    seed: int,
    task_id: int = 1,
    train_frac: float = 0.7,
) -> tuple[DatasetFile, DatasetFile]:
    """Isotropic Gaussian clusters with lattice means; returns (train, test)."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if spread <= 0:
        raise ValueError("spread must be positive")
    rng = np.random.default_rng(seed)
    means = lattice_means(classes, dim, seed)
    x = np.repeat(means, samples_per_class, axis=0) + spread * rng.standard_normal((classes * samples_per_class, dim))
    y = np.repeat(np.arange(classes), samples_per_class)
    params = {"classes": classes, "samples_per_class": samples_per_class, "dim": dim,
              "spread": spread, "train_frac": float(train_frac)}
    (xtr, ytr), (xte, yte) = _split(x, y, classes, samples_per_class, train_frac)
    return (
        DatasetFile(task_id, classes, xtr, ytr, seed, "blobs", {**params, "split": "train"}),
        DatasetFile(task_id, classes, xte, yte, seed, "blobs", {**params, "split": "test"}),
    )


def gen_images(
    classes: int,
    samples_per_class: int,
    shape: Sequence[int],
    spread: float,
    seed: int,
    task_id: int = 1,
    train_frac: float = 0.7,
) -> tuple[DatasetFile, DatasetFile]:
    """Per-class random templates of shape (H, W, C) plus Gaussian pixel noise."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if spread <= 0:
        raise ValueError("spread must be positive")
    shape = tuple(int(s) for s in shape)
    rng = np.random.default_rng(seed)
    templates = rng.uniform(-1.0, 1.0, size=(classes, *shape))
    x = np.repeat(templates, samples_per_class, axis=0)
    x = x + spread * rng.standard_normal(x.shape)
    y = np.repeat(np.arange(classes), samples_per_class)
    params = {"classes": classes, "samples_per_class": samples_per_class, "shape": list(shape),
              "spread": spread, "train_frac": float(train_frac)}
    (xtr, ytr), (xte, yte) = _split(x, y, classes, samples_per_class, train_frac)
    return (
        DatasetFile(task_id, classes, xtr, ytr, seed, "images", {**params, "split": "train"}),
        DatasetFile(task_id, classes, xte, yte, seed, "images", {**params, "split": "test"}),
    )


def gen_multiscale(
    dims: Sequence[int],
    classes: int,
    samples_per_class: int,
    spread: float,
    seed: int,
    train_frac: float = 0.7,
) -> list[tuple[DatasetFile, DatasetFile]]:
    """One blob task per entry of ``dims``, each with its own feature size."""
    return [
        gen_blobs(classes, samples_per_class, d, spread, seed + t, task_id=t + 1, train_frac=train_frac)
        for t, d in enumerate(dims)
    ]


def class_ranges(classes: int, m: int) -> list[tuple[int, int]]:
    """Contiguous class ranges; any remainder goes to the earliest subsets."""
    if m < 1 or m > classes:
        raise ValueError(f"cannot split {classes} classes into {m} subsets")
    q, rem = divmod(classes, m)
    sizes = [q + (t < rem) for t in range(m)]
    edges = np.concatenate([[0], np.cumsum(sizes)])
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def split_classes(base: DatasetFile, m: int, first_task_id: int = 1) -> list[DatasetFile]:
    """Subset ``t`` holds classes [t*c/m, (t+1)*c/m) with labels shifted to start at 0."""
    out = []
    for t, (a, b) in enumerate(class_ranges(base.classes, m)):
        keep = (base.y >= a) & (base.y < b)
        out.append(replace(
            base,
            task_id=first_task_id + t,
            classes=b - a,
            x=base.x[keep].copy(),
            y=base.y[keep] - a,
            generator=f"split({base.generator})",
            params={**base.params, "class_range": [a, b]},
        ))
    return out


def coarse_fine(base: DatasetFile, groups: Mapping[int, int], coarse_task_id: int = 1,
                fine_task_id: int = 2) -> tuple[DatasetFile, DatasetFile]:
    """Two tasks over the same inputs: coarse labels from ``groups`` and the original fine labels."""
    groups = {int(k): int(v) for k, v in groups.items()}
    missing = sorted(set(range(base.classes)) - set(groups))
    if missing:
        raise ValueError(f"fine labels {missing} have no coarse group")
    coarse_ids = sorted(set(groups.values()))
    if coarse_ids != list(range(len(coarse_ids))):
        raise ValueError("coarse labels must be 0..C-1")
    lut = np.array([groups[f] for f in range(base.classes)], dtype=np.int32)
    coarse = replace(
        base, task_id=coarse_task_id, classes=len(coarse_ids), x=base.x.copy(), y=lut[base.y],
        generator=f"coarse({base.generator})", params={**base.params, "level": "coarse"},
    )
    fine = replace(
        base, task_id=fine_task_id, x=base.x.copy(), y=base.y.copy(),
        generator=f"fine({base.generator})", params={**base.params, "level": "fine"},
    )
    return coarse, fine


def pair_groups(classes: int, size: int = 2) -> dict[int, int]:
    """Map consecutive runs of ``size`` fine classes onto one coarse class."""
    return {f: f // size for f in range(classes)}

