"""Command line: ``dvn {plan,gen,train,eval,infer,budget}``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import data as dsets
from .backbone import ModelParams, init_params, predict
from .budget import BudgetError, budget_table, count_params, select_level
from .config import ConfigError, RunConfig, plan_document
from .partition import inclusion_counts, level_mask, s_matrix, validate
from .trainer import MetricRow, TrainConfig, evaluate, train_joint, train_sequential, train_single


def _load(args) -> RunConfig:
    return RunConfig.load(args.config, seed=getattr(args, "seed", None), epochs=getattr(args, "epochs", None),
                          output_dir=getattr(args, "output_dir", None))


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _key(task: int, level: int) -> str:
    return f"{task}:{level}"


# plan


def plan_tables(partition, configs, spec=None) -> tuple[str, dict]:
    k = partition.k
    S = s_matrix(configs)
    n_h = configs[0].n_h
    lines = ["unit orders (level 1 first):"]
    for c in configs:
        lines.append(f"  task {c.task_id}: {' '.join(map(str, c.order))}")
    lines.append("")
    lines.append("S(i, j): level at which unit i enters task j")
    lines.append("  task  " + " ".join(f"u{i:<3}" for i in range(1, k + 1)))
    for c, row in zip(configs, S):
        lines.append(f"  {c.task_id:>4}  " + " ".join(f"{v:<4}" for v in row))
    lines.append("")
    lines.append("significance |n_h - S(i, j)|")
    lines.append("  task  " + " ".join(f"u{i:<3}" for i in range(1, k + 1)))
    for c, row in zip(configs, S):
        lines.append(f"  {c.task_id:>4}  " + " ".join(f"{abs(n_h - v):<4}" for v in row))
    incl = inclusion_counts(configs)
    lines.append("")
    lines.append("loss terms containing each unit: " + " ".join(f"u{i + 1}={n}" for i, n in enumerate(incl)))
    sizes = {}
    if spec is not None:
        lines.append("")
        lines.append("body parameters per (task, level), biases included:")
        for c in configs:
            counts = [count_params(spec, level_mask(partition, c, l)) for l in range(1, c.n_h + 1)]
            sizes[str(c.task_id)] = counts
            lines.append(f"  task {c.task_id}: " + " ".join(map(str, counts)))
    doc = {
        "k": k,
        "orders": {str(c.task_id): list(c.order) for c in configs},
        "s_matrix": S.tolist(),
        "significance": np.abs(n_h - S).tolist(),
        "inclusion_counts": incl,
        "mask_body_params": sizes,
    }
    return "\n".join(lines), doc


def cmd_plan(args) -> int:
    cfg = _load(args)
    if args.k is not None:
        if args.k < 1:
            raise ConfigError("k must be ≥ 1")
        cfg.k = args.k
        cfg.orders = None
    body = cfg.body()
    partition = cfg.partition(body)
    configs = cfg.configs()
    report = validate(partition, configs)
    if not report:
        print(f"invalid plan: {report.violation}", file=sys.stderr)
        return 2
    text, doc = plan_tables(partition, configs, SimpleNamespace(body=body))
    doc["partition"] = partition.to_dict()
    if args.json:
        print(json.dumps(doc, indent=1))
    else:
        print(text)
    _write(cfg.output_dir / "plan.json", json.dumps(doc, indent=1) + "\n")
    return 0


# gen


def cmd_gen(args) -> int:
    out = Path(args.out)
    name = args.generator
    written = []
    if name == "blobs":
        tr, te = dsets.gen_blobs(args.classes, args.samples_per_class, args.dim, args.spread, args.seed,
                                 args.task_id, args.train_frac)
        written += [tr.save(out / f"{args.prefix}_train"), te.save(out / f"{args.prefix}_test")]
    elif name == "images":
        shape = tuple(int(s) for s in args.shape.split("x"))
        tr, te = dsets.gen_images(args.classes, args.samples_per_class, shape, args.spread, args.seed,
                                  args.task_id, args.train_frac)
        written += [tr.save(out / f"{args.prefix}_train"), te.save(out / f"{args.prefix}_test")]
    elif name == "multiscale":
        dims = [int(d) for d in args.dims.split(",")]
        for t, (tr, te) in enumerate(dsets.gen_multiscale(dims, args.classes, args.samples_per_class,
                                                          args.spread, args.seed, args.train_frac), start=1):
            written += [tr.save(out / f"{args.prefix}{t}_train"), te.save(out / f"{args.prefix}{t}_test")]
    elif name in ("split", "coarse-fine"):
        if not args.base:
            raise ConfigError(f"generator {name} needs --base")
        for split in ("train", "test"):
            base = dsets.DatasetFile.load(Path(f"{args.base}_{split}.json"))
            if name == "split":
                parts = dsets.split_classes(base, args.m)
            else:
                parts = list(dsets.coarse_fine(base, dsets.pair_groups(base.classes, args.group_size)))
            for t, ds in enumerate(parts, start=1):
                written.append(ds.save(out / f"{args.prefix}{t}_{split}"))
    for p in written:
        print(p)
    return 0


# train / eval / budget / infer


def _metrics_csv(rows: list[MetricRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MetricRow.FIELDS)
    for r in rows:
        w.writerow([r.epoch, r.task, r.level, r.split, repr(r.loss), repr(r.accuracy)])
    return buf.getvalue()


def cmd_train(args) -> int:
    cfg = _load(args)
    spec, partition, configs, hierarchy = cfg.assemble()
    bundle = cfg.bundle()
    params = init_params(spec, cfg.train.seed)
    summary: dict = {"mode": cfg.mode, "seed": cfg.train.seed, "k": cfg.k}
    if cfg.mode == "joint":
        result = train_joint(bundle, spec, hierarchy, cfg.train, params)
        metrics, final = result.metrics, result.final()
    elif cfg.mode == "single":
        result = train_single(bundle[1], spec, hierarchy[1], cfg.train, params)
        metrics, final = result.metrics, result.final()
    else:
        new_task = max(hierarchy)
        phase1 = None
        if cfg.phase1_epochs is not None:
            phase1 = TrainConfig(**{**cfg.train.__dict__, "epochs": int(cfg.phase1_epochs)})
        result = train_sequential(bundle, spec, hierarchy, cfg.train, params, new_task,
                                  distill=not args.no_distill, phase1=phase1)
        metrics, final = result.metrics, result.final()
        snap = result.snapshot.accuracy
        summary["snapshot_accuracy"] = {_key(*k): v for k, v in sorted(snap.items())}
        summary["forgetting"] = {_key(*k): snap[k] - final[k] for k in sorted(snap)}
        summary["distillation"] = not args.no_distill
    summary["accuracy"] = {_key(*k): v for k, v in sorted(final.items())}

    out = cfg.output_dir
    params.save(out / "params")
    _write(out / "metrics.csv", _metrics_csv(metrics))
    report = budget_table(spec, hierarchy, params, accuracy=final, runs=args.latency_runs, warmup=args.warmup)
    _write(out / "budget.csv", report.to_csv())
    _write(out / "plan.json", json.dumps(plan_document(spec, partition, configs), indent=1) + "\n")
    _write(out / "summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


def _params_path(cfg: RunConfig, given: str | None) -> Path:
    path = Path(given) if given else cfg.output_dir / "params"
    if path.suffix in (".json", ".bin"):
        path = path.with_suffix("")
    if not path.with_suffix(".json").exists():
        raise FileNotFoundError(f"trained parameters {path.with_suffix('.json')} not found")
    return path


def cmd_eval(args) -> int:
    cfg = _load(args)
    spec, _, _, hierarchy = cfg.assemble()
    params = ModelParams.load(_params_path(cfg, args.params))
    bundle = cfg.bundle()
    acc = {}
    for task in sorted(hierarchy):
        for m in hierarchy[task]:
            acc[_key(task, m.level)] = evaluate(params, spec, hierarchy, bundle, task, m.level)
    _write(cfg.output_dir / "eval.json", json.dumps({"accuracy": acc}, indent=1, sort_keys=True) + "\n")
    print(json.dumps({"accuracy": acc}, indent=1, sort_keys=True))
    return 0


def cmd_budget(args) -> int:
    cfg = _load(args)
    spec, _, _, hierarchy = cfg.assemble()
    params = ModelParams.load(_params_path(cfg, args.params)) if args.params or args.latency else None
    report = budget_table(spec, hierarchy, params, runs=args.latency_runs, warmup=args.warmup)
    if args.csv:
        _write(cfg.output_dir / args.csv, report.to_csv(latency=params is not None))
    print(report.pretty())
    return 0


def cmd_infer(args) -> int:
    cfg = _load(args)
    spec, _, _, hierarchy = cfg.assemble()
    if args.task not in hierarchy:
        raise ConfigError(f"unknown task {args.task}")
    params = ModelParams.load(_params_path(cfg, args.params))
    report = budget_table(spec, hierarchy)
    level = select_level(report, args.task, args.budget)
    row = next(r for r in report.for_task(args.task) if r.level == level)
    ds = dsets.DatasetFile.load(Path(args.input))
    mask = hierarchy[args.task][level - 1]
    pred = predict(params, spec, mask, ds.x)
    out = {"task": args.task, "level": level, "params": row.total_params, "budget": args.budget,
           "predictions": pred.tolist()}
    if len(ds) and ds.classes == spec.task(args.task).classes:
        out["accuracy"] = float((pred == ds.y).mean())
    print(f"task {args.task}: level {level} ({row.total_params} parameters within budget {args.budget})",
          file=sys.stderr)
    print(json.dumps(out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dvn", description="Deep virtual networks over one shared parameter store.")
    p.add_argument("-v", "--verbose", action="store_true", help="log test accuracy after every epoch")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, overrides=True):
        sp.add_argument("config", help="run configuration JSON")
        if overrides:
            sp.add_argument("--seed", type=int)
            sp.add_argument("--epochs", type=int)
            sp.add_argument("--output-dir", dest="output_dir")

    sp = sub.add_parser("plan", help="print unit orders, S matrix and mask sizes")
    with_config(sp)
    sp.add_argument("--k", type=int, help="override the number of units")
    sp.add_argument("--json", action="store_true", help="print JSON instead of tables")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("gen", help="generate a synthetic dataset")
    sp.add_argument("generator", choices=["blobs", "images", "multiscale", "split", "coarse-fine"])
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--prefix", default="task")
    sp.add_argument("--classes", type=int, default=4)
    sp.add_argument("--samples-per-class", type=int, default=100)
    sp.add_argument("--dim", type=int, default=2)
    sp.add_argument("--dims", default="2,4,8")
    sp.add_argument("--shape", default="8x8x3")
    sp.add_argument("--spread", type=float, default=0.2)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--task-id", type=int, default=1)
    sp.add_argument("--train-frac", type=float, default=0.7)
    sp.add_argument("--base", help="dataset prefix (without _train/_test) for split / coarse-fine")
    sp.add_argument("--m", type=int, default=2)
    sp.add_argument("--group-size", type=int, default=2)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="train and write params, metrics, budget and summary")
    with_config(sp)
    sp.add_argument("--no-distill", action="store_true", help="sequential ablation without distillation")
    sp.add_argument("--latency-runs", type=int, default=1000)
    sp.add_argument("--warmup", type=int, default=100)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="test accuracy of every (task, level)")
    with_config(sp)
    sp.add_argument("--params")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("infer", help="pick the largest level within a parameter budget and predict")
    with_config(sp)
    sp.add_argument("--params")
    sp.add_argument("--task", type=int, required=True)
    sp.add_argument("--budget", type=int, required=True)
    sp.add_argument("--input", required=True, help="dataset manifest to predict on")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("budget", help="parameter counts, density and latency per (task, level)")
    with_config(sp)
    sp.add_argument("--params")
    sp.add_argument("--latency", action="store_true", help="measure latency using the run's trained params")
    sp.add_argument("--latency-runs", type=int, default=1000)
    sp.add_argument("--warmup", type=int, default=100)
    sp.add_argument("--csv", help="also write the table to this file name under the output directory")
    sp.set_defaults(func=cmd_budget)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except BudgetError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
