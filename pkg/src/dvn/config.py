"""Run configuration: one JSON document describing a whole experiment.

::

    {
      "backbone":  {"preset": "mlp", "width": 24, "depth": 2}
                   or {"body": [LayerSpec...], "input_layers": {"1": LayerSpec...}},
      "partition": {"k": 3, "group_sizes": null, "orders": null},
      "train":     {"schedule": [[0, 0.05]], "momentum": 0.9, "weight_decay": 0.0,
                    "batch_size": 50, "epochs": 200, "temperature": 2.0, "seed": 0},
      "scenario":  {"mode": "joint" | "sequential" | "single",
                    "tasks": [{"task_id": 1, "train": "data/t1_train.json",
                               "test": "data/t1_test.json"}, ...],
                    "phase_boundary": 1, "phase1_epochs": null},
      "output_dir": "runs/example"
    }

Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneSpec, LayerSpec, TaskSpec, attach_hierarchy, conv_preset, mlp_preset
from .data import DatasetFile
from .partition import (
    UnitPartition,
    VirtualNetConfig,
    build_hierarchy,
    derive_orders,
    equal_partition,
    validate,
)
from .trainer import TaskData, TrainConfig

MODES = ("joint", "sequential", "single")


class ConfigError(ValueError):
    pass


@dataclass
class TaskEntry:
    task_id: int
    train: Path | None = None
    test: Path | None = None
    classes: int | None = None
    input_shape: tuple[int, ...] | None = None


@dataclass
class RunConfig:
    backbone: dict
    k: int
    group_sizes: list[list[int]] | None
    orders: list[list[int]] | None
    train: TrainConfig
    mode: str
    tasks: list[TaskEntry]
    phase_boundary: int | None
    phase1_epochs: int | None
    output_dir: Path
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def load(cls, path: str | Path, **overrides) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config {path} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from None
        return cls.from_dict(doc, base=path.parent, **overrides)

    @classmethod
    def from_dict(cls, doc: dict, base: Path = Path("."), seed=None, epochs=None, output_dir=None) -> "RunConfig":
        try:
            scen = doc.get("scenario", {})
            mode = scen.get("mode", "joint")
            if mode not in MODES:
                raise ConfigError(f"mode must be one of {MODES}, not {mode!r}")
            resolve = lambda p: None if p is None else (base / p if not Path(p).is_absolute() else Path(p))
            tasks = [
                TaskEntry(int(t["task_id"]), resolve(t.get("train")), resolve(t.get("test")),
                          t.get("classes"), tuple(t["input_shape"]) if t.get("input_shape") else None)
                for t in scen.get("tasks", [])
            ]
            part = doc.get("partition", {})
            k = int(part.get("k", len(tasks) or 1))
            tdoc = dict(doc.get("train", {}))
            if seed is not None:
                tdoc["seed"] = seed
            if epochs is not None:
                tdoc["epochs"] = epochs
            if "schedule" in tdoc:
                tdoc["schedule"] = [tuple(e) for e in tdoc["schedule"]]
            train = TrainConfig(**tdoc)
            out = output_dir if output_dir is not None else doc.get("output_dir", "runs/default")
            cfg = cls(
                backbone=doc.get("backbone", {"preset": "mlp"}),
                k=k,
                group_sizes=part.get("group_sizes"),
                orders=part.get("orders"),
                train=train,
                mode=mode,
                tasks=tasks,
                phase_boundary=scen.get("phase_boundary"),
                phase1_epochs=scen.get("phase1_epochs"),
                output_dir=resolve(out),
                raw=doc,
            )
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid config: {e}") from None
        cfg.check()
        return cfg

    def check(self) -> None:
        if self.k < 1:
            raise ConfigError("k must be ≥ 1")
        ids = [t.task_id for t in self.tasks]
        if self.mode == "single":
            if ids != [1]:
                raise ConfigError("mode single needs exactly one task, with task_id 1")
        elif self.tasks:
            if sorted(ids) != list(range(1, len(ids) + 1)):
                raise ConfigError("task ids must be 1..number of tasks")
            if len(ids) != self.k:
                raise ConfigError(f"{len(ids)} tasks but k={self.k}; each task owns one unit")
        if self.mode == "sequential":
            if len(ids) < 2:
                raise ConfigError("mode sequential needs at least two tasks")
            if self.phase_boundary != len(ids) - 1:
                raise ConfigError("phase_boundary must equal the number of old tasks (tasks - 1)")

    # assembly

    def body(self) -> list[LayerSpec]:
        b = self.backbone
        preset = b.get("preset")
        if preset == "mlp":
            w, d = int(b.get("width", 24)), int(b.get("depth", 2))
            return [LayerSpec("dense", w, w) for _ in range(d)]
        if preset == "conv":
            c, d = int(b.get("channels", 16)), int(b.get("depth", 4))
            return [LayerSpec("conv2d", c, c, (3, 3), 1, norm=True) for _ in range(d)]
        if preset is not None:
            raise ConfigError(f"unknown backbone preset {preset!r}")
        return [LayerSpec(**{**x, "kernel": tuple(x["kernel"]) if x.get("kernel") else None}) for x in b["body"]]

    def partition(self, body: list[LayerSpec] | None = None) -> UnitPartition:
        body = self.body() if body is None else body
        if self.group_sizes is not None:
            if len(self.group_sizes) != len(body):
                raise ConfigError("group_sizes needs one list per body layer")
            for r, (sizes, layer) in enumerate(zip(self.group_sizes, body)):
                if len(sizes) != self.k or sum(sizes) != layer.out_channels or min(sizes) < 1:
                    raise ConfigError(f"group_sizes of layer {r} must be {self.k} positive sizes summing to {layer.out_channels}")
            return UnitPartition.from_sizes(self.group_sizes)
        try:
            return equal_partition(body, self.k)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def configs(self) -> list[VirtualNetConfig]:
        if self.orders is not None:
            return [VirtualNetConfig(j + 1, tuple(o)) for j, o in enumerate(self.orders)]
        orders = derive_orders(self.k)
        if self.mode == "single":
            return orders[:1]
        return orders

    def task_specs(self) -> list[TaskSpec]:
        specs = []
        for t in self.tasks:
            classes, shape = t.classes, t.input_shape
            if classes is None or shape is None:
                if t.train is None:
                    raise ConfigError(f"task {t.task_id} needs a train dataset or classes/input_shape")
                man = t.train.with_suffix(".json")
                if not man.exists():
                    raise FileNotFoundError(f"dataset {man} not found")
                meta = json.loads(man.read_text())
                classes = classes if classes is not None else int(meta["classes"])
                shape = shape if shape is not None else tuple(meta["feature_shape"])
            specs.append(TaskSpec(t.task_id, int(classes), tuple(shape)))
        return specs

    def backbone_spec(self) -> BackboneSpec:
        tasks = self.task_specs()
        b = self.backbone
        if b.get("preset") == "mlp":
            return mlp_preset(tasks, int(b.get("width", 24)), int(b.get("depth", 2)))
        if b.get("preset") == "conv":
            return conv_preset(tasks, int(b.get("channels", 16)), int(b.get("depth", 4)))
        inputs = {int(t): LayerSpec(**{**x, "kernel": tuple(x["kernel"]) if x.get("kernel") else None})
                  for t, x in b["input_layers"].items()}
        return BackboneSpec(self.body(), inputs, tasks)

    def assemble(self):
        """(spec with hierarchy, partition, configs, hierarchy); validates the plan."""
        spec = self.backbone_spec()
        partition = self.partition(spec.body)
        configs = self.configs()
        report = validate(partition, configs)
        if not report:
            raise ConfigError(report.violation)
        hierarchy = build_hierarchy(partition, configs)
        return attach_hierarchy(spec, hierarchy), partition, configs, hierarchy

    def bundle(self) -> dict[int, TaskData]:
        out = {}
        for t in self.tasks:
            if t.train is None or t.test is None:
                raise ConfigError(f"task {t.task_id} needs train and test datasets")
            out[t.task_id] = TaskData(DatasetFile.load(t.train), DatasetFile.load(t.test))
        return out


def plan_document(spec: BackboneSpec, partition: UnitPartition, configs) -> dict:
    """Backbone, partition and unit orders in one JSON-ready document."""
    return {
        "backbone": spec.to_dict(),
        "partition": partition.to_dict(),
        "configs": [{"task_id": c.task_id, "order": list(c.order)} for c in configs],
    }
