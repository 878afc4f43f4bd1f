"""Desk-scale experiments shared by the acceptance suite and ``scripts/``.

Each function builds its data, backbone and hierarchy from a seed and
returns plain numbers, so a script can print them and a test can assert on
them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import TaskSpec, attach_hierarchy, conv_preset, init_params, mlp_preset
from .budget import BudgetReport, budget_table
from .data import gen_blobs, split_classes
from .partition import build_hierarchy, derive_orders, equal_partition
from .trainer import TaskData, TrainConfig, train_joint, train_sequential


def _assemble(spec, k):
    hier = build_hierarchy(equal_partition(spec, k), derive_orders(k))
    return attach_hierarchy(spec, hier), hier


@dataclass
class JointBlobs:
    """Three 2-D blob tasks, 4 classes each, 500 train / 200 test."""

    tasks: int = 3
    classes: int = 4
    spread: float = 0.2
    data_seed: int = 10
    init_seed: int = 0
    train: TrainConfig = field(default_factory=lambda: TrainConfig([(0, 0.05)], epochs=200, batch_size=50))

    def run(self) -> dict[tuple[int, int], float]:
        bundle = {}
        for j in range(1, self.tasks + 1):
            # 175 per class at 5/7 gives exactly 125 train + 50 test per class
            tr, te = gen_blobs(self.classes, 175, 2, self.spread, self.data_seed + j, task_id=j, train_frac=5 / 7)
            bundle[j] = TaskData(tr, te)
        spec = mlp_preset([TaskSpec(j, self.classes, (2,)) for j in bundle])
        spec, hier = _assemble(spec, self.tasks)
        return train_joint(bundle, spec, hier, self.train, init_params(spec, self.init_seed)).final()


@dataclass
class SplitForgetting:
    """Eight 4-D blob classes split into two 4-class tasks, learned one after the other."""

    seed: int = 1
    lr: float = 0.1
    phase1_epochs: int = 50
    phase2_epochs: int = 200
    temperature: float = 2.0

    def run(self, distill: bool) -> tuple[float, float]:
        """(snapshot, final) top-level test accuracy of the old task."""
        tr, te = gen_blobs(8, 250, 4, 0.4, seed=self.seed, train_frac=0.7)
        bundle = {j + 1: TaskData(a, b) for j, (a, b) in enumerate(zip(split_classes(tr, 2), split_classes(te, 2)))}
        spec, hier = _assemble(mlp_preset([TaskSpec(j, 4, (4,)) for j in (1, 2)]), 2)
        phase1 = TrainConfig([(0, self.lr)], epochs=self.phase1_epochs, seed=self.seed)
        phase2 = TrainConfig([(0, self.lr)], epochs=self.phase2_epochs, seed=self.seed, temperature=self.temperature)
        res = train_sequential(bundle, spec, hier, phase2, init_params(spec, self.seed), new_task=2,
                               distill=distill, phase1=phase1)
        top = (1, 2)
        return res.snapshot.accuracy[top], res.final()[top]

    def drops(self) -> tuple[float, float]:
        """Old-task top-level accuracy drop with and without distillation."""
        with_d = self.run(True)
        without = self.run(False)
        return with_d[0] - with_d[1], without[0] - without[1]


def conv_budget(k: int = 4, channels: int = 32, size: int = 16, classes: int = 3, runs: int = 1000,
                warmup: int = 100, seed: int = 0) -> BudgetReport:
    """Budget table of an untrained conv preset with measured single-sample latency."""
    spec = conv_preset([TaskSpec(j, classes, (size, size, 3)) for j in range(1, k + 1)], channels)
    spec, hier = _assemble(spec, k)
    params = init_params(spec, seed)
    rng = np.random.default_rng(seed)
    samples = {j: rng.standard_normal((size, size, 3)) for j in hier}
    return budget_table(spec, hier, params, samples, runs=runs, warmup=warmup, density_bias=False)
