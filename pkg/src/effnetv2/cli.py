"""Command-line entry point: ``effnetv2 {inspect,count,schedule,train,nas,export}``.

Exit codes: 0 success, 1 invalid input or configuration, 2 failure while running.
Run settings come from an optional JSON file (``--config``) validated against
``schemas/runconfig.schema.json``; flags and ``--set section.key=value`` override it.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import math
import os
import sys
from dataclasses import fields
from pathlib import Path

from .arch import ArchSpec, ArchSpecError, PRESETS, count_flops, get_preset, instantiate, with_classes
from .arch.schema import schema_errors
from .data import DatasetError, MINIVAL_FRACTION, Splits, load_cifar10, split_minival, synthetic_dataset
from .schedule import (
    MODES,
    PROGRESSIVE_PRESETS,
    Regularization,
    ScheduleError,
    StageSchedule,
    format_plans,
    plans_for_mode,
)
from .tensor import derive_rng
from .trainer import CheckpointError, TrainConfig, Trainer, TrainingError

OUTPUT_ENV = "EFFV2_OUTPUT_DIR"
CHECKPOINT_NAME = "checkpoint.efv2"
CONFIG_SCHEMA = "runconfig.schema.json"

DEFAULTS = {
    "arch": "nano",
    "seed": 0,
    "checkpoint_every": 0,
    "dataset": {"kind": "synthetic", "num_classes": 10, "train_size": 1024, "eval_size": 256, "image_size": 32,
                "snr": 4.0, "max_shift": 2, "minival_fraction": 0.1},
    "train": {"epochs": 2.0, "warmup_epochs": 0.5},
    "schedule": {"num_stages": 4, "resample_every_epochs": 8},
    "augment": {"randaug_num_ops": 2, "cutout_size": 0},
    "nas": {"budget": 32, "epochs": 3.0, "image_size": 64, "batch_size": 32, "layer_delta": 2,
            "timing_batch": 8, "timing_repeats": 5, "memory_budget_mb": 2048},
}


class UsageError(Exception):
    """Bad input; carries every problem found."""

    def __init__(self, problems):
        self.problems = [problems] if isinstance(problems, str) else list(problems)
        super().__init__("; ".join(self.problems))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- configuration ----------------------------------------------------------


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def read_json(path, what: str = "file"):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{p}: line {e.lineno}, column {e.colno}: {e.msg}") from None


def _parse_set(item: str):
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise UsageError(f"--set expects section.key=value, got {item!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node: dict = {}
    cur = node
    parts = key.split(".")
    for part in parts[:-1]:
        cur = cur.setdefault(part, {})
    cur[parts[-1]] = value
    return node


def _flag_overrides(args) -> dict:
    """Map the dedicated flags onto config keys; ``None`` means not given."""
    table = {
        "arch": ("arch",), "seed": ("seed",), "output_dir": ("output_dir",),
        "checkpoint_every": ("checkpoint_every",), "epochs": ("train", "epochs"),
        "batch_size": ("train", "batch_size"), "schedule_mode": ("train", "schedule_mode"),
        "lr_peak": ("train", "lr_peak"), "stages": ("schedule", "num_stages"),
        "preset": ("schedule", "preset"), "total_steps": ("schedule", "total_steps"),
        "size_min": ("schedule", "size_min"), "size_max": ("schedule", "size_max"),
        "data": ("dataset", "path"), "dataset": ("dataset", "kind"),
        "train_size": ("dataset", "train_size"), "budget": ("nas", "budget"),
    }
    out: dict = {}
    for attr, path in table.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        cur = out
        for part in path[:-1]:
            cur = cur.setdefault(part, {})
        cur[path[-1]] = value
    return out


def resolve_config(args, extra: dict | None = None) -> dict:
    """defaults <- config file <- subcommand-specific flags <- generic flags <- --set."""
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        user = read_json(args.config, "config file")
        problems = schema_errors(user, CONFIG_SCHEMA)
        if problems:
            raise UsageError([f"{args.config}: {p}" for p in problems])
        cfg = _merge(cfg, user)
    cfg = _merge(cfg, extra or {})
    cfg = _merge(cfg, _flag_overrides(args))
    for item in getattr(args, "set", None) or []:
        cfg = _merge(cfg, _parse_set(item))
    if "output_dir" not in cfg:
        cfg["output_dir"] = os.environ.get(OUTPUT_ENV) or "runs"
    problems = schema_errors(cfg, CONFIG_SCHEMA)
    problems += _reference_problems(cfg)
    if not problems:  # range checks beyond the schema assume well-typed values
        problems = _semantic_problems(cfg)
    if problems:
        raise UsageError(problems)
    return cfg


def _reference_problems(cfg: dict) -> list[str]:
    """Referenced files must exist; checked even when other fields are malformed."""
    out = []
    if isinstance(cfg.get("arch"), str):
        try:
            load_arch(cfg["arch"])
        except UsageError as e:
            out += e.problems
    ds = cfg.get("dataset")
    if isinstance(ds, dict) and ds.get("kind") == "cifar10":
        if not ds.get("path"):
            out.append("dataset.path is required for kind 'cifar10'")
        elif not Path(str(ds["path"])).is_dir():
            out.append(f"dataset.path: directory not found: {ds['path']}")
    return out


def _semantic_problems(cfg: dict) -> list[str]:
    out = train_config(cfg).problems()
    sched = cfg["schedule"]
    lo, hi = sched.get("size_min"), sched.get("size_max")
    if lo is not None and hi is not None and lo > hi:
        out.append(f"schedule: size_min ({lo}) exceeds size_max ({hi})")
    for key in ("reg_min", "reg_max"):
        if key in sched:
            out += Regularization(**_regs(sched[key])).problems(f"schedule.{key}.")
    return out


def _regs(d: dict) -> dict:
    return {k: float(d.get(k, 0.0)) for k in ("dropout", "randaug", "mixup")}


def train_config(cfg: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    kw = {k: v for k, v in cfg["train"].items() if k in known}
    kw.update(cfg["augment"])
    kw["seed"] = cfg["seed"]
    if "schedule_mode" not in kw and cfg["schedule"].get("preset"):
        kw["schedule_mode"] = "progressive_adaptive"
    tc = TrainConfig.__new__(TrainConfig)  # build without raising so problems() can list everything
    for f in fields(TrainConfig):
        setattr(tc, f.name, kw.get(f.name, f.default))
    return tc


def load_arch(ref: str) -> ArchSpec:
    """A preset name, or a path to an architecture JSON file."""
    if ref.lower() in PRESETS:
        return get_preset(ref)
    p = Path(ref)
    if not p.is_file():
        raise UsageError(f"arch: {ref!r} is neither a preset ({', '.join(sorted(PRESETS))}) nor an existing file")
    try:
        return ArchSpec.from_json(p.read_text())
    except ArchSpecError as e:
        raise UsageError(f"{p}: {e}") from None


def output_dir(cfg: dict) -> Path:
    return Path(cfg["output_dir"])


def _under(out: Path, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() else out / p


# -- data ---------------------------------------------------------------------


def load_data(cfg: dict) -> Splits:
    ds, seed = cfg["dataset"], cfg["seed"]
    if ds["kind"] == "cifar10":
        splits = load_cifar10(ds["path"], seed=seed)
        if ds.get("limit"):
            keep = sorted(derive_rng(seed, "limit").permutation(len(splits.train))[: ds["limit"]])
            splits = Splits(splits.train.subset(keep), splits.minival, splits.eval)
        return splits
    train = synthetic_dataset(ds["num_classes"], ds["train_size"], ds["image_size"], derive_rng(seed, "data", "train"),
                              ds["snr"], ds["max_shift"])
    test = synthetic_dataset(ds["num_classes"], ds["eval_size"], ds["image_size"], derive_rng(seed, "data", "eval"),
                             ds["snr"], ds["max_shift"], templates=train.templates)
    train, minival = split_minival(train, ds.get("minival_fraction", MINIVAL_FRACTION), seed)
    test.split = "eval"
    return Splits(train, minival, test)


def stage_schedule(cfg: dict, steps_per_epoch: int, default_size: int) -> StageSchedule:
    s = cfg["schedule"]
    total = s.get("total_steps") or max(1, int(round(cfg["train"]["epochs"] * steps_per_epoch)))
    if s.get("preset"):
        s0, se, r0, re = PROGRESSIVE_PRESETS[s["preset"]]
    else:
        s0 = se = default_size
        r0 = re = Regularization()
    se = s.get("size_max", se)
    s0 = s.get("size_min", s0 if s.get("preset") else se)
    if "reg_min" in s:
        r0 = Regularization(**_regs(s["reg_min"]))
    if "reg_max" in s:
        re = Regularization(**_regs(s["reg_max"]))
    sched = StageSchedule(total, min(s["num_stages"], total), s0, se, r0, re)
    problems = sched.problems()
    if problems:
        raise UsageError([f"schedule: {p}" for p in problems])
    return sched


def _steps_per_epoch(cfg: dict) -> int:
    ds = cfg["dataset"]
    if ds["kind"] == "cifar10":
        n = ds.get("limit") or 49_000
    else:
        n = ds["train_size"] - int(round(ds.get("minival_fraction", MINIVAL_FRACTION) * ds["train_size"]))
    return max(1, n // cfg["train"].get("batch_size", 32))


# -- subcommands ----------------------------------------------------------------


def _stage_rows(arch: ArchSpec) -> list[tuple]:
    rows = [(0, arch.stem.label(), arch.stem.stride, arch.stem.out_channels, arch.stem.num_layers)]
    for i, s in enumerate(arch.stages, 1):
        rows.append((i, s.label(), s.stride, s.out_channels, s.num_layers))
    rows.append((len(arch.stages) + 1, arch.head.label(), arch.head.stride, arch.head.out_channels,
                 arch.head.num_layers))
    return rows


def _table(header, rows) -> str:
    cells = [tuple(map(str, header))] + [tuple(map(str, r)) for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    arch = load_arch(args.arch)
    if args.json:
        print(arch.to_json(), end="")
    else:
        print(f"{arch.name}  (classes={arch.num_classes}, default image size={arch.default_image_size})")
        print(_table(("Stage", "Operator", "Stride", "#Channels", "#Layers"), _stage_rows(arch)))
    if args.save:
        out = _under(Path(args.output_dir or os.environ.get(OUTPUT_ENV) or "runs"), args.save)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(arch.to_json())
        print(f"wrote {out}", file=sys.stderr)
    return 0


def cmd_count(args) -> int:
    arch = load_arch(args.arch)
    if args.num_classes:
        arch = with_classes(arch, args.num_classes)
    size = args.image_size or arch.default_image_size
    if size < 8:
        raise UsageError(f"--image-size must be >= 8, got {size}")
    report = count_flops(arch, size)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2))
        return 0
    rows = [(s.name, s.label, f"{s.params:,}", f"{s.flops:,}", "x".join(map(str, s.out_shape)))
            for s in report.per_stage]
    print(f"{report.arch} at {size}x{size} (FLOPs are multiply-accumulates)")
    print(_table(("stage", "operator", "params", "flops", "output"), rows))
    print(f"total params: {report.params:,} ({report.params / 1e6:.2f}M)")
    print(f"total flops: {report.flops:,} ({report.flops / 1e9:.3f}B)")
    return 0


def cmd_schedule(args) -> int:
    cfg = resolve_config(args)
    sched = stage_schedule(cfg, _steps_per_epoch(cfg), cfg["dataset"]["image_size"])
    mode = train_config(cfg).schedule_mode
    plans = plans_for_mode(mode, sched, _steps_per_epoch(cfg), cfg["seed"],
                           cfg["schedule"]["resample_every_epochs"])
    if args.json:
        print(json.dumps({"mode": mode, "schedule": sched.to_dict(), "plans": [p.to_dict() for p in plans]}, indent=2))
    else:
        print(f"mode: {mode}, total steps: {sched.total_steps}")
        print(format_plans(plans))
    return 0


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = output_dir(cfg)
    ckpt_path = out / CHECKPOINT_NAME
    if args.resume and not ckpt_path.is_file():
        raise UsageError(f"--resume: no checkpoint at {ckpt_path}")
    splits = load_data(cfg)
    tc = train_config(cfg)
    problems = tc.problems()
    if problems:
        raise UsageError(problems)
    tc = TrainConfig(**{f.name: getattr(tc, f.name) for f in fields(TrainConfig)})
    spe = max(1, len(splits.train) // tc.batch_size)
    sched = stage_schedule(cfg, spe, splits.train.image_size)
    plans = plans_for_mode(tc.schedule_mode, sched, spe, tc.seed, cfg["schedule"]["resample_every_epochs"])
    arch = with_classes(load_arch(cfg["arch"]), splits.train.num_classes)
    model = instantiate(arch, tc.seed)
    trainer = Trainer(model, splits.train, plans, tc, splits.minival, splits.eval, out, cfg["checkpoint_every"])
    if args.resume:
        trainer.load(ckpt_path)
    _write_json(out / "run_config.json", cfg)
    _write_json(out / "plans.json", [p.to_dict() for p in plans])
    metrics = trainer.run(args.max_steps)
    trainer.save(ckpt_path)
    last = metrics.rows[-1] if metrics.rows else {}
    summary = {k: last.get(k) for k in ("step", "train_loss", "minival_acc", "minival_ema_acc", "eval_acc",
                                        "eval_ema_acc")}
    summary["steps_done"] = trainer.step
    summary["total_steps"] = trainer.total_steps
    summary["stopped_early"] = metrics.stopped_early
    _write_json(out / "summary.json", summary)
    print(f"trained {trainer.step}/{trainer.total_steps} steps; metrics in {out / 'metrics.csv'}")
    for k in ("minival_acc", "eval_acc", "eval_ema_acc"):
        if summary.get(k) is not None:
            print(f"{k}: {summary[k]:.4f}")
    return 0


def cmd_nas(args) -> int:
    from .nas import EvalConfig, SearchSpace, random_search

    extra = {"nas": {k: v for k, v in (("epochs", args.nas_epochs), ("image_size", args.image_size)) if v is not None}}
    cfg = resolve_config(args, extra)
    n = cfg["nas"]
    out = output_dir(cfg)
    splits = load_data(cfg)
    ecfg = EvalConfig(epochs=n["epochs"], image_size=n["image_size"], batch_size=n["batch_size"],
                      lr_peak=cfg["train"].get("lr_peak"),
                      warmup_epochs=min(cfg["train"].get("warmup_epochs", 0.5), n["epochs"]),
                      timing_batch=n["timing_batch"], timing_repeats=n["timing_repeats"],
                      memory_budget_bytes=int(n["memory_budget_mb"] * 2 ** 20), seed=cfg["seed"])
    space = SearchSpace.around(load_arch(cfg["arch"]), layer_delta=n["layer_delta"])

    def log(c):
        status = ", ".join(c.flags) or "ok"
        shown = "n/a" if c.reward is None else f"{c.reward:.4f}"
        print(f"[{c.index + 1}/{n['budget']}] reward={shown} A={c.A} S={c.S and round(c.S, 3)} "
              f"P={c.P and round(c.P, 3)} ({status})", file=sys.stderr)

    res = random_search(space, n["budget"], splits.train, splits.minival, ecfg, out / "trace.jsonl", log=log)
    _write_json(out / "pareto.json", {
        "baseline_step_time": res.baseline_time, "baseline_params": res.baseline_params,
        "best": res.best.index if res.best.reward is not None else None,
        "front": [c.to_record() for c in sorted(res.front, key=lambda c: c.index)],
    })
    _write_json(out / "run_config.json", cfg)
    rows = [(c.index, f"{c.A:.4f}", f"{c.S:.3f}", f"{c.P:.3f}", f"{c.reward:.4f}")
            for c in sorted(res.front, key=lambda c: -c.reward)]
    print(f"evaluated {len(res.candidates)} candidates; Pareto front ({len(res.front)}):")
    print(_table(("index", "A", "S", "P", "reward"), rows))
    return 0


def _read_rows(path: Path) -> tuple[list, list]:
    if path.suffix == ".jsonl":
        recs = []
        for i, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise UsageError(f"{path}: line {i}, column {e.colno}: {e.msg}") from None
            row = {"index": rec.get("index"), "arch": rec.get("arch", {}).get("name")}
            row.update((k, ";".join(v) if isinstance(v, list) else v) for k, v in rec.items() if k not in row)
            recs.append(row)
        cols = list(dict.fromkeys(k for r in recs for k in r))
        return cols, recs
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        cols = list(reader.fieldnames or [])
        rows = [{k: _number(v) for k, v in r.items()} for r in reader]
    return cols, rows


def _number(v):
    if v is None or v == "":
        return None
    try:
        x = float(v)
    except ValueError:
        return v
    return int(x) if x.is_integer() and "." not in v and "e" not in v.lower() else x


def cmd_export(args) -> int:
    src = Path(args.source)
    if not src.is_file():
        raise UsageError(f"source not found: {src}")
    cols, rows = _read_rows(src)
    if args.columns:
        wanted = [c.strip() for c in args.columns.split(",") if c.strip()]
        missing = [c for c in wanted if c not in cols]
        if missing:
            raise UsageError([f"unknown column {c!r}; available: {', '.join(cols)}" for c in missing])
        cols = wanted
    rows = [{c: r.get(c) for c in cols} for r in rows]
    if args.drop_empty:
        rows = [r for r in rows if all(v is not None for v in r.values())]
    fmt = args.format
    out_dir = Path(args.output_dir or os.environ.get(OUTPUT_ENV) or "runs")
    target = _under(out_dir, args.out or f"{src.stem}_export.{fmt}")
    if target.resolve() == src.resolve():
        raise UsageError(f"refusing to overwrite the source file {src}")
    target.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        clean = {c: [None if isinstance(r[c], float) and not math.isfinite(r[c]) else r[c] for r in rows] for c in cols}
        target.write_text(json.dumps({"source": src.name, "rows": len(rows), "columns": clean}, indent=2) + "\n")
    else:
        with open(target, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(cols)
            for r in rows:
                w.writerow(["" if r[c] is None else r[c] for c in cols])
    print(f"wrote {len(rows)} rows to {target}")
    return 0


# -- argument parsing -------------------------------------------------------------


def _run_flags(p, *, train: bool = False) -> None:
    p.add_argument("--config", help="JSON run config (see docs/formats.md)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    p.add_argument("--arch", help="preset name or architecture JSON path")
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir", help=f"default: ${OUTPUT_ENV} or ./runs")
    p.add_argument("--dataset", choices=("synthetic", "cifar10"))
    p.add_argument("--data", help="CIFAR-10 binary directory")
    p.add_argument("--train-size", type=int, help="synthetic training set size")
    if train:
        p.add_argument("--epochs", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr-peak", type=float)
        p.add_argument("--schedule-mode", choices=MODES)
        p.add_argument("--stages", type=int)
        p.add_argument("--size-min", type=int)
        p.add_argument("--size-max", type=int)
        p.add_argument("--preset", choices=tuple(PROGRESSIVE_PRESETS))
        p.add_argument("--total-steps", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="effnetv2", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("inspect", help="print the stage table of a preset or architecture file")
    p.add_argument("arch")
    p.add_argument("--json", action="store_true", help="print the architecture JSON instead")
    p.add_argument("--save", metavar="PATH", help="write the architecture JSON (relative to the output dir)")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("count", help="parameter and FLOP report")
    p.add_argument("arch")
    p.add_argument("--image-size", type=int)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("schedule", help="print the resolved per-stage plan")
    _run_flags(p, train=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("train", help="train a model, writing metrics.csv and a checkpoint")
    _run_flags(p, train=True)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in the output dir")
    p.add_argument("--max-steps", type=int, help="stop after this many steps (resume later)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("nas", help="random architecture search with the accuracy/speed/size reward")
    _run_flags(p)
    p.add_argument("--budget", type=int)
    p.add_argument("--epochs", type=float, dest="nas_epochs", help="training epochs per candidate")
    p.add_argument("--image-size", type=int)
    p.add_argument("--lr-peak", type=float)
    p.set_defaults(func=cmd_nas)

    p = sub.add_parser("export", help="convert metrics.csv or trace.jsonl to CSV/JSON for plotting")
    p.add_argument("source")
    p.add_argument("--format", choices=("csv", "json"), default="json")
    p.add_argument("--columns", help="comma-separated subset")
    p.add_argument("--drop-empty", action="store_true", help="keep only rows with every selected column set")
    p.add_argument("--out", help="output file (relative to the output dir)")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as e:
        for problem in e.problems:
            print(f"error: {problem}", file=sys.stderr)
        return 1
    except (ArchSpecError, ScheduleError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DatasetError, CheckpointError, TrainingError, OSError, RuntimeError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
