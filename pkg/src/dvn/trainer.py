"""Objectives and training loops over a hierarchy of masked networks.

Three objectives share the tape machinery:

* ``nested_loss``: one task, a cross-entropy term per level.
* ``joint_loss``: every task and every level, summed (one term per (task, level)).
* ``sequential_loss``: distillation terms for old tasks on new-task inputs plus
  cross-entropy for the new task, again per level.

``lwf_loss`` is the plain full-network learning-without-forgetting objective,
written without masks so it can serve as an independent reference.

Weight decay enters every objective once as (wd/2)*sum ||W||^2 over all weight
tensors, so its gradient arrives through backprop and ``sgd_step`` only
applies the momentum update.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .backbone import BackboneSpec, ModelParams, forward_logits
from .data import DatasetFile
from .partition import Hierarchy, LevelMask
from .tensor import Tape, Tensor, softmax

Key = tuple[int, int]  # (task, level)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    schedule: list[tuple[int, float]] = field(default_factory=lambda: [(0, 0.05)])
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 50
    epochs: int = 10
    temperature: float = 2.0
    seed: int = 0

    def __post_init__(self):
        self.schedule = sorted((int(e), float(r)) for e, r in self.schedule)
        if not self.schedule or self.schedule[0][0] != 0:
            raise ValueError("learning-rate schedule must start at epoch 0")
        if any(r <= 0 for _, r in self.schedule):
            raise ValueError("learning rates must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be >= 0")

    def rate(self, epoch: int) -> float:
        lr = self.schedule[0][1]
        for start, r in self.schedule:
            if start <= epoch:
                lr = r
        return lr


@dataclass
class TaskData:
    train: DatasetFile
    test: DatasetFile

    @property
    def classes(self) -> int:
        return self.train.classes


TaskBundle = dict  # task id -> TaskData


@dataclass
class LossResult:
    total: Tensor
    terms: dict[tuple, Tensor]
    tape: Tape
    logits: dict[tuple, Tensor] = field(default_factory=dict)

    def breakdown(self) -> dict[tuple, float]:
        return {k: t.item() for k, t in self.terms.items()}


def _decay(tape: Tape, params: ModelParams, weight_decay: float) -> Tensor | None:
    if weight_decay == 0:
        return None
    sq = tape.add_n([tape.sum_squares(params[n]) for n in params.weight_names()])
    return tape.scale(sq, 0.5 * weight_decay)


def _finish(tape, params, terms, weight_decay, logits) -> LossResult:
    total = tape.add_n(list(terms.values()))
    decay = _decay(tape, params, weight_decay)
    if decay is not None:
        total = tape.add(total, decay)
    return LossResult(total, terms, tape, logits)


def nested_loss(params, spec, masks: Sequence[LevelMask], batch, weight_decay: float = 0.0,
                mode: str = "train") -> LossResult:
    """Single task: sum over its levels of the cross-entropy of each level's output."""
    x, y = batch
    tape = Tape()
    terms, logits = {}, {}
    for m in masks:
        z = forward_logits(params, spec, m, x, mode, tape)
        logits[m.level] = z
        terms[m.level] = tape.softmax_xent(z, y)
    return _finish(tape, params, terms, weight_decay, logits)


def joint_loss(params, spec, hierarchy: Hierarchy, batches: dict, weight_decay: float = 0.0,
               mode: str = "train") -> LossResult:
    """Sum of one cross-entropy term per (task, level); ``batches[task] = (x, y)``."""
    if sorted(batches) != sorted(hierarchy):
        raise ValueError(f"batches for tasks {sorted(batches)} but hierarchy has {sorted(hierarchy)}")
    tape = Tape()
    terms, logits = {}, {}
    for task in sorted(hierarchy):
        x, y = batches[task]
        for m in hierarchy[task]:
            z = forward_logits(params, spec, m, x, mode, tape)
            logits[(task, m.level)] = z
            terms[(task, m.level)] = tape.softmax_xent(z, y)
    return _finish(tape, params, terms, weight_decay, logits)


def backprop(params: ModelParams, result: LossResult, output: Tensor | None = None) -> dict[str, np.ndarray]:
    """Zero gradients, backprop ``output`` (default: the total) and return all grads."""
    params.zero_grad()
    result.tape.backward(result.total if output is None else output)
    return params.grads()


def joint_grad(params: ModelParams, result: LossResult) -> dict[str, np.ndarray]:
    return backprop(params, result)


def term_grad(params: ModelParams, result: LossResult, key) -> dict[str, np.ndarray]:
    """Gradient of a single term of ``result``."""
    return backprop(params, result, result.terms[key])


def sgd_step(params: ModelParams, velocity: dict[str, np.ndarray], config: TrainConfig, epoch: int) -> dict:
    """Nesterov momentum step: v <- mu*v + g;  w <- w - lr*(g + mu*v)."""
    lr, mu = config.rate(epoch), config.momentum
    for name, t in params.tensors.items():
        g = t.grad_or_zeros()
        v = velocity.get(name)
        v = g.copy() if v is None else mu * v + g
        velocity[name] = v
        t.data -= lr * (g + mu * v)
    return velocity


def epoch_batches(n: int, batch_size: int, steps: int, seed: int, epoch: int, task: int) -> list[np.ndarray]:
    """``steps`` full batches of sample indices, reshuffled per (seed, epoch, task)."""
    rng = np.random.default_rng([seed, epoch, task])
    need = steps * batch_size
    order = np.concatenate([rng.permutation(n) for _ in range(math.ceil(need / n))])
    return [order[s * batch_size : (s + 1) * batch_size] for s in range(steps)]


@dataclass
class MetricRow:
    epoch: int
    task: int
    level: int
    split: str
    loss: float
    accuracy: float

    FIELDS = ("epoch", "task", "level", "split", "loss", "accuracy")

    def as_tuple(self):
        return (self.epoch, self.task, self.level, self.split, self.loss, self.accuracy)


@dataclass
class TrainResult:
    params: ModelParams
    metrics: list[MetricRow]
    steps: int = 0

    def final(self, split: str = "test") -> dict[Key, float]:
        last = max(r.epoch for r in self.metrics)
        return {(r.task, r.level): r.accuracy for r in self.metrics if r.epoch == last and r.split == split}


def _mask(hierarchy: Hierarchy, task: int, level: int) -> LevelMask:
    if task not in hierarchy:
        raise KeyError(f"unknown task {task}")
    for m in hierarchy[task]:
        if m.level == level:
            return m
    raise KeyError(f"task {task} has no level {level}")


def evaluate(params, spec, hierarchy: Hierarchy, bundle: TaskBundle, task: int, level: int,
             split: str = "test") -> float:
    """Fraction of samples whose argmax eval-mode logit equals the label."""
    m = _mask(hierarchy, task, level)
    ds = getattr(bundle[task], split)
    if len(ds) == 0:
        return 0.0
    z = forward_logits(params, spec, m, ds.x, "eval").data
    correct = int((z.argmax(axis=1) == ds.y).sum())
    return correct / len(ds)


def _eval_rows(params, spec, hierarchy, bundle, epoch) -> list[MetricRow]:
    rows = _test_rows(params, spec, hierarchy, bundle, epoch)
    if log.isEnabledFor(logging.INFO):
        log.info("epoch %d  %s", epoch, "  ".join(f"{r.task}:{r.level}={r.accuracy:.3f}" for r in rows))
    return rows


def _test_rows(params, spec, hierarchy, bundle, epoch) -> list[MetricRow]:
    rows = []
    for task in sorted(hierarchy):
        ds = bundle[task].test
        for m in hierarchy[task]:
            tape = Tape()
            z = forward_logits(params, spec, m, ds.x, "eval", tape)
            loss = tape.softmax_xent(z, ds.y).item()
            acc = int((z.data.argmax(axis=1) == ds.y).sum()) / len(ds)
            rows.append(MetricRow(epoch, task, m.level, "test", loss, acc))
    return rows


class _Running:
    def __init__(self):
        self.loss: dict = {}
        self.correct: dict = {}
        self.count: dict = {}

    def add(self, key, loss: float, logits: np.ndarray, y: np.ndarray):
        self.loss[key] = self.loss.get(key, 0.0) + loss * len(y)
        self.correct[key] = self.correct.get(key, 0) + int((logits.argmax(axis=1) == y).sum())
        self.count[key] = self.count.get(key, 0) + len(y)

    def rows(self, epoch) -> list[MetricRow]:
        return [
            MetricRow(epoch, t, l, "train", self.loss[(t, l)] / self.count[(t, l)],
                      self.correct[(t, l)] / self.count[(t, l)])
            for (t, l) in sorted(self.loss)
        ]


StepHook = Callable[[int, ModelParams], None]


def train_joint(bundle: TaskBundle, spec: BackboneSpec, hierarchy: Hierarchy, config: TrainConfig,
                params: ModelParams, on_step: StepHook | None = None, epoch_offset: int = 0) -> TrainResult:
    """Minimize the joint objective; one fresh minibatch per task per step.

    ``params`` is updated in place and returned. Metrics hold, per epoch,
    train loss/accuracy per (task, level) and test loss/accuracy per
    (task, level).
    """
    tasks = sorted(hierarchy)
    sizes = {t: len(bundle[t].train) for t in tasks}
    steps = max(math.ceil(n / config.batch_size) for n in sizes.values())
    velocity: dict = {}
    metrics: list[MetricRow] = []
    step = 0
    for epoch in range(config.epochs):
        plan = {t: epoch_batches(sizes[t], config.batch_size, steps, config.seed, epoch, t) for t in tasks}
        running = _Running()
        for s in range(steps):
            batches = {t: (bundle[t].train.x[plan[t][s]], bundle[t].train.y[plan[t][s]]) for t in tasks}
            res = joint_loss(params, spec, hierarchy, batches, config.weight_decay)
            joint_grad(params, res)
            sgd_step(params, velocity, config, epoch)
            step += 1
            for (t, l), term in res.terms.items():
                running.add((t, l), term.item(), res.logits[(t, l)].data, batches[t][1])
            if on_step is not None:
                on_step(step, params)
        metrics += running.rows(epoch + epoch_offset)
        metrics += _eval_rows(params, spec, hierarchy, bundle, epoch + epoch_offset)
    return TrainResult(params, metrics, step)


def train_single(data: TaskData, spec: BackboneSpec, masks: Sequence[LevelMask], config: TrainConfig,
                 params: ModelParams, on_step: StepHook | None = None) -> TrainResult:
    """Single-task nested training (one term per level), the k = 1 special case."""
    task = masks[0].task
    n = len(data.train)
    steps = math.ceil(n / config.batch_size)
    velocity: dict = {}
    metrics: list[MetricRow] = []
    step = 0
    for epoch in range(config.epochs):
        plan = epoch_batches(n, config.batch_size, steps, config.seed, epoch, task)
        running = _Running()
        for idx in plan:
            x, y = data.train.x[idx], data.train.y[idx]
            res = nested_loss(params, spec, masks, (x, y), config.weight_decay)
            backprop(params, res)
            sgd_step(params, velocity, config, epoch)
            step += 1
            for level, term in res.terms.items():
                running.add((task, level), term.item(), res.logits[level].data, y)
            if on_step is not None:
                on_step(step, params)
        metrics += running.rows(epoch)
        metrics += _eval_rows(params, spec, {task: list(masks)}, {task: data}, epoch)
    return TrainResult(params, metrics, step)


@dataclass
class SoftTargets:
    """Old-network soft outputs per (old task, level) on a fixed set of new-task samples."""

    sample_ids: np.ndarray
    q: dict[Key, np.ndarray]
    temperature: float

    def __post_init__(self):
        self._pos = {int(s): i for i, s in enumerate(self.sample_ids)}

    def rows(self, key: Key, ids) -> np.ndarray:
        try:
            pos = [self._pos[int(i)] for i in ids]
        except KeyError as e:
            raise KeyError(f"no recorded soft target for sample {e.args[0]}") from None
        return self.q[key][pos]


@dataclass
class Snapshot:
    params: ModelParams
    targets: SoftTargets | None = None
    accuracy: dict[Key, float] = field(default_factory=dict)


def distill_targets(snapshot: ModelParams, spec, old_hierarchy: Hierarchy, new_x: np.ndarray,
                    temperature: float, sample_ids=None) -> SoftTargets:
    """softmax(z_old / T) for every old (task, level) on each new-task input."""
    ids = np.arange(len(new_x)) if sample_ids is None else np.asarray(sample_ids)
    q = {}
    for task in sorted(old_hierarchy):
        for m in old_hierarchy[task]:
            z = forward_logits(snapshot, spec, m, new_x, "eval").data
            q[(task, m.level)] = softmax(z, temperature)
    return SoftTargets(ids, q, temperature)


def sequential_loss(params, spec, hierarchy: Hierarchy, new_task: int, batch, targets: SoftTargets | None,
                    temperature: float, weight_decay: float = 0.0, distill: bool = True,
                    mode: str = "train") -> LossResult:
    """Distillation per old (task, level) on new inputs plus new-task cross-entropy per level.

    ``batch`` is ``(x, y, sample_ids)``; ids index into ``targets``. Term keys
    are ``("distill", task, level)`` and ``("ce", new_task, level)``.
    """
    x, y, ids = batch
    tape = Tape()
    terms, logits = {}, {}
    if distill:
        for task in sorted(hierarchy):
            if task == new_task:
                continue
            for m in hierarchy[task]:
                q = targets.rows((task, m.level), ids)
                z = forward_logits(params, spec, m, x, mode, tape)
                logits[("distill", task, m.level)] = z
                terms[("distill", task, m.level)] = tape.soft_xent(z, q, temperature)
    for m in hierarchy[new_task]:
        z = forward_logits(params, spec, m, x, mode, tape)
        logits[("ce", new_task, m.level)] = z
        terms[("ce", new_task, m.level)] = tape.softmax_xent(z, y)
    return _finish(tape, params, terms, weight_decay, logits)


def distill_grad(params, result: LossResult) -> dict[str, np.ndarray]:
    """Gradient of the sum of the distillation terms only."""
    keys = [k for k in result.terms if k[0] == "distill"]
    total = result.tape.add_n([result.terms[k] for k in keys])
    return backprop(params, result, total)


def _full_forward(tape: Tape, params: ModelParams, spec: BackboneSpec, task: int, x, train: bool) -> Tensor:
    """Unmasked network of ``task`` with its level-1 head; no channel selection at all."""
    h = tape.input(x)
    layers = [(spec.input_layers[task], f"input.{task}", "in")]
    layers += [(l, f"body.{r}", str(r)) for r, l in enumerate(spec.body)]
    for layer, prefix, key in layers:
        w, b = params[prefix + ".weight"], params[prefix + ".bias"]
        h = tape.matmul(h, w) if layer.kind == "dense" else tape.conv2d(h, w, layer.stride)
        h = tape.bias_add(h, b)
        if layer.norm:
            p = f"norm.{task}.1.{key}"
            h = tape.channel_norm(h, params[p + ".scale"], params[p + ".shift"], train,
                                  params.buffers[p + ".running_mean"], params.buffers[p + ".running_var"])
        if layer.relu:
            h = tape.relu(h)
    if h.ndim == 4:
        h = tape.mean_pool(h)
    return tape.bias_add(tape.matmul(h, params[f"head.{task}.1.weight"]), params[f"head.{task}.1.bias"])


def lwf_loss(params, spec, old_tasks: Iterable[int], new_task: int, batch, old_outputs: dict[int, np.ndarray],
             temperature: float, weight_decay: float = 0.0) -> LossResult:
    """Learning without forgetting on the whole network: one distillation term per old
    task plus the new task's cross-entropy. ``old_outputs[task]`` are the recorded soft
    targets for the rows of ``batch``."""
    x, y = batch[0], batch[1]
    tape = Tape()
    terms = {}
    for task in old_tasks:
        z = _full_forward(tape, params, spec, task, x, True)
        terms[("distill", task, 1)] = tape.soft_xent(z, old_outputs[task], temperature)
    z = _full_forward(tape, params, spec, new_task, x, True)
    terms[("ce", new_task, 1)] = tape.softmax_xent(z, y)
    return _finish(tape, params, terms, weight_decay, {})


@dataclass
class SequentialResult:
    params: ModelParams
    snapshot: Snapshot
    metrics: list[MetricRow]

    def final(self) -> dict[Key, float]:
        last = max(r.epoch for r in self.metrics)
        return {(r.task, r.level): r.accuracy for r in self.metrics if r.epoch == last and r.split == "test"}


def train_sequential(bundle: TaskBundle, spec: BackboneSpec, hierarchy: Hierarchy, config: TrainConfig,
                     params: ModelParams, new_task: int, distill: bool = True,
                     phase1: TrainConfig | None = None, on_step: StepHook | None = None) -> SequentialResult:
    """Phase 1 trains the old tasks jointly; phase 2 trains ``new_task`` with distillation.

    The snapshot holds a frozen copy of the phase-1 parameters, the recorded
    soft targets on the new task's training inputs, and the phase-1 test
    accuracies used to measure forgetting.
    """
    old = {t: ms for t, ms in hierarchy.items() if t != new_task}
    if not old:
        raise ValueError("sequential training needs at least one old task")
    phase1 = config if phase1 is None else phase1
    first = train_joint(bundle, spec, old, phase1, params)
    frozen = params.copy()
    new_train = bundle[new_task].train
    targets = distill_targets(frozen, spec, old, new_train.x, config.temperature)
    acc = {(t, m.level): evaluate(frozen, spec, hierarchy, bundle, t, m.level) for t in old for m in old[t]}
    snap = Snapshot(frozen, targets, acc)

    n = len(new_train)
    steps = math.ceil(n / config.batch_size)
    velocity: dict = {}
    metrics = list(first.metrics)
    offset = phase1.epochs
    step = 0
    for epoch in range(config.epochs):
        plan = epoch_batches(n, config.batch_size, steps, config.seed, epoch, new_task)
        running = _Running()
        for idx in plan:
            batch = (new_train.x[idx], new_train.y[idx], idx)
            res = sequential_loss(params, spec, hierarchy, new_task, batch, targets, config.temperature,
                                  config.weight_decay, distill)
            backprop(params, res)
            sgd_step(params, velocity, config, epoch)
            step += 1
            for key, term in res.terms.items():
                if key[0] == "ce":
                    running.add(key[1:], term.item(), res.logits[key].data, batch[1])
            if on_step is not None:
                on_step(step, params)
        metrics += running.rows(epoch + offset)
        metrics += _eval_rows(params, spec, hierarchy, bundle, epoch + offset)
    return SequentialResult(params, snap, metrics)
