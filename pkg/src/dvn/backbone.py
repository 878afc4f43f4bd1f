"""Physical network: layer specs, the shared parameter store and masked forward.

Parameter names::

    input.{task}.weight / .bias          task-specific, never partitioned
    body.{r}.weight / .bias              shared, partitioned into units
    head.{task}.{level}.weight / .bias   one classifier per (task, level)
    norm.{task}.{level}.{layer}.scale / .shift
                                         layer is "in" or the body index

Running statistics of the norms live in ``ModelParams.buffers`` under the
norm prefix with ``.running_mean`` / ``.running_var``.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .partition import Hierarchy, LevelMask
from .tensor import DTYPE, ShapeError, Tape, Tensor

NORM_MOMENTUM = 0.1


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "dense" or "conv2d"
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] | None = None
    stride: int | None = None
    norm: bool = False
    relu: bool = True

    def __post_init__(self):
        if self.kind not in ("dense", "conv2d"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.kind == "dense" and (self.kernel is not None or self.stride is not None):
            raise ValueError("dense layers take no kernel or stride")
        if self.kind == "conv2d":
            if self.kernel is None:
                object.__setattr__(self, "kernel", (3, 3))
            object.__setattr__(self, "kernel", tuple(int(v) for v in self.kernel))
            if self.stride is None:
                object.__setattr__(self, "stride", 1)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "dense":
            return (self.in_channels, self.out_channels)
        return (*self.kernel, self.in_channels, self.out_channels)

    @property
    def kernel_area(self) -> int:
        return 1 if self.kind == "dense" else self.kernel[0] * self.kernel[1]


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    classes: int
    input_shape: tuple[int, ...]  # (D,) for vectors, (H, W, C) for images


@dataclass
class BackboneSpec:
    """Body layers, per-task input layers and the per-(task, level) head/norm widths.

    ``widths[(task, level)]`` lists the active channel count after the input
    layer and after every body layer; it is filled from a hierarchy by
    ``attach_hierarchy`` and fixes head and norm parameter shapes.
    """

    body: list[LayerSpec]
    input_layers: dict[int, LayerSpec]
    tasks: list[TaskSpec]
    widths: dict[tuple[int, int], tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        for r in range(1, len(self.body)):
            if self.body[r - 1].out_channels != self.body[r].in_channels:
                raise ValueError(f"body layers {r - 1} and {r} are not channel-compatible")
        ids = [t.task_id for t in self.tasks]
        if sorted(self.input_layers) != sorted(ids):
            raise ValueError("every task needs exactly one input layer")
        first = self.body[0].in_channels
        for tid, layer in self.input_layers.items():
            if layer.out_channels != first:
                raise ValueError(f"input layer of task {tid} emits {layer.out_channels} channels, body expects {first}")
        shapes = {tid: self.input_output_shape(tid) for tid in ids}
        if len(set(shapes.values())) > 1:
            raise ValueError(f"task input layers disagree on output shape: {shapes}")

    def task(self, task_id: int) -> TaskSpec:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(f"unknown task {task_id}")

    def input_output_shape(self, task_id: int) -> tuple[int, ...]:
        layer, shape = self.input_layers[task_id], self.task(task_id).input_shape
        if layer.kind == "dense":
            if len(shape) != 1 or shape[0] != layer.in_channels:
                raise ValueError(f"task {task_id}: dense input layer cannot take shape {shape}")
            return (layer.out_channels,)
        if len(shape) != 3 or shape[2] != layer.in_channels:
            raise ValueError(f"task {task_id}: conv input layer cannot take shape {shape}")
        s = layer.stride
        return (-(-shape[0] // s), -(-shape[1] // s), layer.out_channels)

    def levels(self, task_id: int) -> list[int]:
        return sorted(l for (t, l) in self.widths if t == task_id)

    def norm_layers(self) -> list[str]:
        layers = []
        if any(l.norm for l in self.input_layers.values()):
            layers.append("in")
        layers += [str(r) for r, l in enumerate(self.body) if l.norm]
        return layers

    def to_dict(self) -> dict:
        return {
            "body": [asdict(l) for l in self.body],
            "input_layers": {str(t): asdict(l) for t, l in self.input_layers.items()},
            "tasks": [asdict(t) for t in self.tasks],
            "widths": {f"{t}:{l}": list(w) for (t, l), w in sorted(self.widths.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        layer = lambda x: LayerSpec(**{**x, "kernel": tuple(x["kernel"]) if x.get("kernel") else None})
        widths = {}
        for key, w in d.get("widths", {}).items():
            t, l = key.split(":")
            widths[(int(t), int(l))] = tuple(w)
        return cls(
            body=[layer(x) for x in d["body"]],
            input_layers={int(t): layer(x) for t, x in d["input_layers"].items()},
            tasks=[TaskSpec(int(t["task_id"]), int(t["classes"]), tuple(t["input_shape"])) for t in d["tasks"]],
            widths=widths,
        )


def attach_hierarchy(spec: BackboneSpec, hierarchy: Hierarchy) -> BackboneSpec:
    """Record the active widths of every (task, level) so heads and norms can be sized."""
    widths = {}
    for task, masks in hierarchy.items():
        spec.task(task)
        for m in masks:
            widths[(task, m.level)] = (m.in_width[0], *m.out_width)
    return BackboneSpec(spec.body, spec.input_layers, spec.tasks, widths)


def mlp_preset(tasks: Sequence[TaskSpec], width: int = 24, depth: int = 2) -> BackboneSpec:
    """Dense body [in -> width -> width -> width], no norm; for exact gradient checks."""
    return BackboneSpec(
        body=[LayerSpec("dense", width, width) for _ in range(depth)],
        input_layers={t.task_id: LayerSpec("dense", t.input_shape[0], width) for t in tasks},
        tasks=list(tasks),
    )


def conv_preset(tasks: Sequence[TaskSpec], channels: int = 16, depth: int = 4) -> BackboneSpec:
    """Four 3x3 conv body layers with norm; input strides equalize spatial size."""
    target = min(min(t.input_shape[0], t.input_shape[1]) for t in tasks)
    inputs = {}
    for t in tasks:
        stride = max(1, t.input_shape[0] // target)
        inputs[t.task_id] = LayerSpec("conv2d", t.input_shape[2], channels, (3, 3), stride, norm=True)
    return BackboneSpec(
        body=[LayerSpec("conv2d", channels, channels, (3, 3), 1, norm=True) for _ in range(depth)],
        input_layers=inputs,
        tasks=list(tasks),
    )


@dataclass
class ModelParams:
    tensors: dict[str, Tensor]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {n: t.grad_or_zeros() for n, t in self.tensors.items()}

    def weight_names(self) -> list[str]:
        """Names of tensors subject to l2 decay (all weight matrices/kernels)."""
        return [n for n in self.tensors if n.endswith(".weight")]

    def copy(self) -> "ModelParams":
        return ModelParams(
            {n: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=n) for n, t in self.tensors.items()},
            {n: b.copy() for n, b in self.buffers.items()},
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.tensors.values()])

    def save(self, path: str | os.PathLike) -> None:
        """Write ``<path>.bin`` (float64 LE) and ``<path>.json`` (name, shape, offset)."""
        path = Path(path)
        manifest, chunks, offset = [], [], 0
        for kind, items in (("param", self.tensors.items()), ("buffer", self.buffers.items())):
            for name, value in items:
                arr = value.data if isinstance(value, Tensor) else value
                manifest.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset})
                chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
                offset += arr.size
        _atomic_write(path.with_suffix(".bin"), b"".join(chunks))
        doc = {"dtype": "float64-le", "count": offset, "tensors": manifest}
        _atomic_write(path.with_suffix(".json"), json.dumps(doc, indent=1).encode())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ModelParams":
        path = Path(path)
        doc = json.loads(path.with_suffix(".json").read_text())
        raw = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
        if raw.size != doc["count"]:
            raise ValueError(f"{path}: binary holds {raw.size} values, manifest says {doc['count']}")
        tensors, buffers = {}, {}
        for e in doc["tensors"]:
            size = int(np.prod(e["shape"], dtype=int))
            arr = raw[e["offset"] : e["offset"] + size].astype(DTYPE).reshape(e["shape"])
            if e["kind"] == "param":
                tensors[e["name"]] = Tensor(arr, requires_grad=True, name=e["name"])
            else:
                buffers[e["name"]] = arr
        return cls(tensors, buffers)


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


def _xavier(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    receptive = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
    fan_in, fan_out = shape[-2] * receptive, shape[-1] * receptive
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(spec: BackboneSpec, seed: int) -> ModelParams:
    """Xavier-uniform weights from the full layer shape, zero biases, unit norm scales."""
    if not spec.widths:
        raise ValueError("spec has no hierarchy attached; call attach_hierarchy first")
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}

    def add(name, value):
        tensors[name] = Tensor(value, requires_grad=True, name=name)

    for t in spec.tasks:
        layer = spec.input_layers[t.task_id]
        add(f"input.{t.task_id}.weight", _xavier(rng, layer.weight_shape))
        add(f"input.{t.task_id}.bias", np.zeros(layer.out_channels))
    for r, layer in enumerate(spec.body):
        add(f"body.{r}.weight", _xavier(rng, layer.weight_shape))
        add(f"body.{r}.bias", np.zeros(layer.out_channels))
    for (task, level), widths in sorted(spec.widths.items()):
        classes = spec.task(task).classes
        add(f"head.{task}.{level}.weight", _xavier(rng, (widths[-1], classes)))
        add(f"head.{task}.{level}.bias", np.zeros(classes))
        layers = [("in", spec.input_layers[task], widths[0])]
        layers += [(str(r), l, widths[r + 1]) for r, l in enumerate(spec.body)]
        for key, layer, c in layers:
            if not layer.norm:
                continue
            prefix = f"norm.{task}.{level}.{key}"
            add(prefix + ".scale", np.ones(c))
            add(prefix + ".shift", np.zeros(c))
            buffers[prefix + ".running_mean"] = np.zeros(c)
            buffers[prefix + ".running_var"] = np.ones(c)
    return ModelParams(tensors, buffers)


def _apply_layer(tape, params, layer, prefix, norm_prefix, h, in_sel, out_sel, train):
    w = params[prefix + ".weight"]
    b = params[prefix + ".bias"]
    w = tape.take(w, in_sel, out_sel)
    b = tape.take(b, out_sel)
    if layer.kind == "dense":
        h = tape.matmul(h, w)
    else:
        h = tape.conv2d(h, w, layer.stride)
    h = tape.bias_add(h, b)
    if layer.norm:
        scale, shift = params[norm_prefix + ".scale"], params[norm_prefix + ".shift"]
        rm = params.buffers[norm_prefix + ".running_mean"]
        rv = params.buffers[norm_prefix + ".running_var"]
        h = tape.channel_norm(h, scale, shift, train, rm, rv)
        if train:
            op = tape.nodes[-1].op
            n = op.count
            rm *= 1.0 - NORM_MOMENTUM
            rm += NORM_MOMENTUM * op.batch_mean
            rv *= 1.0 - NORM_MOMENTUM
            rv += NORM_MOMENTUM * op.batch_var * (n / max(n - 1, 1))
    if layer.relu:
        h = tape.relu(h)
    return h


def forward_logits(
    params: ModelParams,
    spec: BackboneSpec,
    mask: LevelMask,
    batch,
    mode: str = "eval",
    tape: Tape | None = None,
) -> Tensor:
    """Logits of ``mask``'s (task, level) network on ``batch``.

    Only the weight blocks selected by the mask enter the computation, so
    parameters outside it get exactly-zero gradients and cannot affect the
    output. Train mode normalizes with batch statistics and updates the running
    buffers of this (task, level).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', not {mode!r}")
    task, level = mask.task, mask.level
    if (task, level) not in spec.widths:
        raise KeyError(f"no head for task {task} level {level}")
    tape = Tape() if tape is None else tape
    train = mode == "train"
    x = tape.input(batch)
    want = spec.task(task).input_shape
    if tuple(x.shape[1:]) != tuple(want):
        raise ShapeError(f"task {task} expects samples of shape {want}, got {x.shape[1:]}")

    first = spec.input_layers[task]
    h = _apply_layer(
        tape, params, first, f"input.{task}", f"norm.{task}.{level}.in", x,
        slice(None), mask.in_index[0], train,
    )
    for r, layer in enumerate(spec.body):
        h = _apply_layer(
            tape, params, layer, f"body.{r}", f"norm.{task}.{level}.{r}", h,
            mask.in_index[r], mask.out_index[r], train,
        )
    if h.ndim == 4:
        h = tape.mean_pool(h)
    h = tape.matmul(h, params[f"head.{task}.{level}.weight"])
    return tape.bias_add(h, params[f"head.{task}.{level}.bias"])


def predict(params, spec, mask, batch, chunk: int = 1024) -> np.ndarray:
    """Argmax labels under eval mode."""
    out = []
    for s in range(0, len(batch), chunk):
        out.append(forward_logits(params, spec, mask, batch[s : s + chunk]).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)

