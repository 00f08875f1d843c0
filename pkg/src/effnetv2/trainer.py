"""Training loop: RMSProp, staircase or cosine LR, EMA, progressive stages, checkpoints."""

from __future__ import annotations

import bisect
import csv
import json
import math
import os
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .arch.model import ForwardContext, Network, is_decayed
from .data import (
    Dataset,
    channel_stats,
    cutout,
    mixup,
    one_hot,
    randaugment,
    resize,
    standardize,
    to_float,
)
from .schedule import MODES, Regularization, StagePlan

LR_REFERENCE_BATCH = 4096
PAPER_LR_PEAK = 0.256


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: float = 1.0
    batch_size: int = 32
    rmsprop_decay: float = 0.9
    momentum: float = 0.9
    bn_momentum: float = 0.99
    weight_decay: float = 1e-5
    lr_peak: Optional[float] = None  # None: 0.256 * batch_size / 4096
    lr_decay_factor: float = 0.97
    lr_decay_every_epochs: float = 2.4
    warmup_epochs: float = 5.0
    lr_schedule: str = "staircase"  # or "cosine"
    ema_decay: float = 0.9999
    ema_warmup: bool = True
    stochastic_depth_survival: float = 0.8
    rmsprop_eps: float = 1e-3
    schedule_mode: str = "fixed"
    randaug_num_ops: int = 2
    cutout_size: int = 0
    early_stopping_patience: int = 0  # evaluations without improvement; 0 disables
    eval_every_epochs: float = 1.0
    seed: int = 0

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.batch_size < 1:
            out.append(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.epochs > 0:
            out.append(f"epochs must be > 0, got {self.epochs}")
        for name in ("rmsprop_decay", "momentum", "bn_momentum", "ema_decay"):
            v = getattr(self, name)
            if not 0 <= v < 1 and not (name == "ema_decay" and v == 1):
                out.append(f"{name} must be in [0, 1), got {v}")
        if self.weight_decay < 0:
            out.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.lr_peak is not None and not self.lr_peak > 0:
            out.append(f"lr_peak must be > 0, got {self.lr_peak}")
        if not 0 < self.lr_decay_factor <= 1:
            out.append(f"lr_decay_factor must be in (0, 1], got {self.lr_decay_factor}")
        if not self.lr_decay_every_epochs > 0:
            out.append(f"lr_decay_every_epochs must be > 0, got {self.lr_decay_every_epochs}")
        if self.warmup_epochs < 0:
            out.append(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if self.lr_schedule not in ("staircase", "cosine"):
            out.append(f"lr_schedule must be 'staircase' or 'cosine', got {self.lr_schedule!r}")
        if not 0 < self.stochastic_depth_survival <= 1:
            out.append(f"stochastic_depth_survival must be in (0, 1], got {self.stochastic_depth_survival}")
        if not self.rmsprop_eps > 0:
            out.append(f"rmsprop_eps must be > 0, got {self.rmsprop_eps}")
        if self.schedule_mode not in MODES:
            out.append(f"schedule_mode must be one of {', '.join(MODES)}, got {self.schedule_mode!r}")
        if self.randaug_num_ops < 0 or self.cutout_size < 0 or self.early_stopping_patience < 0:
            out.append("randaug_num_ops, cutout_size and early_stopping_patience must be >= 0")
        if not self.eval_every_epochs > 0:
            out.append(f"eval_every_epochs must be > 0, got {self.eval_every_epochs}")
        return out

    @property
    def peak_lr(self) -> float:
        if self.lr_peak is not None:
            return self.lr_peak
        return PAPER_LR_PEAK * self.batch_size / LR_REFERENCE_BATCH


# -- learning rate --------------------------------------------------------


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int, total_steps: Optional[int] = None) -> float:
    """Linear warmup from 0, then staircase decay (or cosine decay to 0 over ``total_steps``)."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    peak = cfg.peak_lr
    epoch = step / steps_per_epoch
    if epoch < cfg.warmup_epochs:
        return peak * epoch / cfg.warmup_epochs
    if cfg.lr_schedule == "cosine":
        if total_steps is None:
            raise ValueError("cosine schedule needs total_steps")
        start = cfg.warmup_epochs * steps_per_epoch
        span = max(total_steps - 1 - start, 1)
        frac = min((step - start) / span, 1.0)
        return 0.5 * peak * (1 + math.cos(math.pi * frac))
    # tolerance so that e.g. 4.8 / 2.4 lands on 2 rather than 1.999...
    k = math.floor((epoch - cfg.warmup_epochs) / cfg.lr_decay_every_epochs + 1e-9)
    return peak * cfg.lr_decay_factor ** k


# -- optimizer and EMA ----------------------------------------------------


def rmsprop_step(params: dict, grads: dict, state: dict, lr: float, cfg: TrainConfig) -> dict:
    """In-place RMSProp with momentum.

    acc <- rho * acc + (1 - rho) * g^2; mom <- mu * mom + lr * g / sqrt(acc + eps); p <- p - mom.
    ``weight_decay * p`` is added to g for parameters whose name ends with "weight".
    """
    rho, mu = cfg.rmsprop_decay, cfg.momentum
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if not np.all(np.isfinite(g)):
            raise T.NonFiniteError(f"non-finite gradient for {name!r}")
        if cfg.weight_decay and is_decayed(name):
            g = g + p.dtype.type(cfg.weight_decay) * p
        if name not in state:
            state[name] = (np.zeros_like(p), np.zeros_like(p))
        acc, mom = state[name]
        acc *= rho
        acc += (1 - rho) * g * g
        mom *= mu
        mom += p.dtype.type(lr) * g / np.sqrt(acc + p.dtype.type(cfg.rmsprop_eps))
        p -= mom
    return state


def ema_decay_at(step: int, cfg: TrainConfig) -> float:
    if cfg.ema_warmup:
        return min(cfg.ema_decay, (1 + step) / (10 + step))
    return cfg.ema_decay


def ema_update(shadow: dict, params: dict, decay: float = 0.9999) -> dict:
    """shadow <- decay * shadow + (1 - decay) * params, in place."""
    for name, p in params.items():
        s = shadow[name]
        s *= s.dtype.type(decay)
        s += s.dtype.type(1 - decay) * p
    return shadow


# -- metrics --------------------------------------------------------------

METRIC_COLUMNS = (
    "step", "epoch", "stage", "image_size", "dropout", "randaug", "mixup", "lr", "train_loss",
    "minival_acc", "minival_ema_acc", "eval_acc", "eval_ema_acc", "step_time", "cumulative_time",
)
WALL_CLOCK_COLUMNS = ("step_time", "cumulative_time")
_INT_COLUMNS = {"step", "epoch", "stage", "image_size"}


@dataclass
class Metrics:
    rows: list = field(default_factory=list)
    stopped_early: bool = False

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if r.get(name) is None else r[name] for r in self.rows], dtype=float)

    def last(self, name: str):
        for r in reversed(self.rows):
            if r.get(name) is not None:
                return r[name]
        return None

    def deterministic(self) -> list:
        return [{k: v for k, v in r.items() if k not in WALL_CLOCK_COLUMNS} for r in self.rows]

    def to_csv(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(METRIC_COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(r.get(c)) for c in METRIC_COLUMNS])
        os.replace(tmp, path)

    @classmethod
    def from_csv(cls, path) -> "Metrics":
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
                raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
            rows = [{k: _parse(k, v) for k, v in r.items()} for r in reader]
        return cls(rows)


def _fmt(v):
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def _parse(key, v):
    if v == "":
        return None
    return int(v) if key in _INT_COLUMNS else float(v)


# -- checkpoints ----------------------------------------------------------

MAGIC = b"EFV2"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2, np.dtype("u1"): 3, np.dtype("<i4"): 4}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


@dataclass
class Checkpoint:
    step: int
    tensors: dict
    state: dict  # JSON-serialisable RNG and loop state
    version: int = CHECKPOINT_VERSION


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    blob = json.dumps(ckpt.state, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<IQI", ckpt.version, ckpt.step, len(blob)), blob,
             struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _DTYPE_TAGS:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BB", _DTYPE_TAGS[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt.newbyteorder("<")).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(data: bytes, source: str = "checkpoint") -> Checkpoint:
    def fail(msg):
        raise CheckpointError(f"{source}: {msg}")

    if len(data) < 24 or data[:4] != MAGIC:
        fail("not an EFV2 checkpoint (bad magic or header)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    version, step, blob_len = struct.unpack_from("<IQI", data, 4)
    if version != CHECKPOINT_VERSION:
        fail(f"format version {version}, expected {CHECKPOINT_VERSION}")
    if zlib.crc32(body) != crc:
        fail("checksum mismatch (truncated or corrupt)")
    pos = 20
    try:
        state = json.loads(body[pos:pos + blob_len])
        pos += blob_len
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            name = body[pos + 4:pos + 4 + n].decode()
            pos += 4 + n
            tag, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            dt = _TAG_DTYPES[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(body):
                fail(f"record {name!r} runs past end of file")
            tensors[name] = np.frombuffer(body, dt, int(np.prod(shape, dtype=np.int64)), pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as e:
        fail(f"corrupt record data ({e})")
    if pos != len(body):
        fail(f"{len(body) - pos} trailing bytes")
    return Checkpoint(step, tensors, state, version)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Atomic write: a crash mid-save leaves any previous file intact."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), path.name)


# -- batches --------------------------------------------------------------


def prepare_batch(images: np.ndarray, labels: np.ndarray, num_classes: int, size: int, regs: Regularization,
                  cfg: TrainConfig, mean, std, seed: int, step: int):
    """Float conversion, resize, per-image RandAugment and cutout, standardization, then mixup.

    Every random draw comes from a stream derived from (seed, purpose, step[, sample]) so batches
    are reproducible independent of anything that ran before.
    """
    x = to_float(images, T.get_dtype())
    if x.shape[-1] != size or x.shape[-2] != size:
        x = resize(x, size)
    if regs.randaug > 0 and cfg.randaug_num_ops > 0:
        x = np.stack([randaugment(img, regs.randaug, cfg.randaug_num_ops, T.derive_rng(seed, "randaug", step, i))
                      for i, img in enumerate(x)])
    if cfg.cutout_size > 0:
        x = np.stack([cutout(img, min(cfg.cutout_size, size), T.derive_rng(seed, "cutout", step, i))
                      for i, img in enumerate(x)])
    x = standardize(x, mean, std)
    if regs.mixup > 0 and len(x) >= 2:
        y = one_hot(labels, num_classes, x.dtype)
        x, y, _ = mixup(x, y, regs.mixup, T.derive_rng(seed, "mixup", step))
        return np.ascontiguousarray(x), y
    return np.ascontiguousarray(x), labels


def train_step(model: Network, x: np.ndarray, y: np.ndarray, ctx: ForwardContext, opt_state: dict,
               lr: float, cfg: TrainConfig) -> float:
    """Forward, backward and one RMSProp update. Returns the loss."""
    model.zero_grad()
    loss = T.softmax_cross_entropy(model(x, ctx), y)
    value = float(loss.data)
    if not math.isfinite(value):
        raise DivergenceError(f"loss is {value}")
    T.backward(loss)
    params = dict(model.named_parameters())
    rmsprop_step({k: p.data for k, p in params.items()}, {k: p.grad for k, p in params.items()},
                 opt_state, lr, cfg)
    return value


def evaluate(model: Network, dataset: Dataset, image_size: int, mean=None, std=None, batch_size: int = 256,
             params: Optional[dict] = None) -> float:
    """Top-1 accuracy of an eval-mode forward pass (``params`` swaps in e.g. EMA weights)."""
    if len(dataset) == 0:
        return float("nan")
    if mean is None:
        mean, std = channel_stats(dataset)
    correct = 0
    with model.swapped_params(params or {}):
        for lo in range(0, len(dataset), batch_size):
            x = to_float(dataset.images[lo:lo + batch_size], T.get_dtype())
            if x.shape[-1] != image_size:
                x = resize(x, image_size)
            logits = model(standardize(x, mean, std)).data
            correct += int((logits.argmax(axis=1) == dataset.labels[lo:lo + batch_size]).sum())
    return correct / len(dataset)


# -- the loop -------------------------------------------------------------


class Trainer:
    """Runs a list of stage plans over a training set, evaluating minival once per epoch.

    Weights carry over between stages untouched. ``run(max_steps)`` can stop early (to simulate
    an interruption); ``save``/``load`` round-trip the full state, so a loaded trainer continues
    exactly as the uninterrupted one would.
    """

    def __init__(self, model: Network, train_set: Dataset, plans: list, cfg: TrainConfig,
                 minival: Optional[Dataset] = None, eval_set: Optional[Dataset] = None,
                 out_dir=None, checkpoint_every: int = 0):
        if len(train_set) < cfg.batch_size:
            raise TrainingError(f"training set ({len(train_set)}) smaller than one batch ({cfg.batch_size})")
        self.model, self.train_set, self.cfg = model, train_set, cfg
        self.minival, self.eval_set = minival, eval_set
        self.plans = sorted(plans, key=lambda p: p.start_step)
        self._starts = [p.start_step for p in self.plans]
        self.total_steps = self.plans[-1].end_step
        self.steps_per_epoch = len(train_set) // cfg.batch_size
        self.eval_every = max(1, int(round(cfg.eval_every_epochs * self.steps_per_epoch)))
        self.mean, self.std = channel_stats(train_set)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.checkpoint_every = checkpoint_every
        self.step = 0
        self.opt_state: dict = {}
        self.ema = {k: p.data.copy() for k, p in model.named_parameters()}
        self.metrics = Metrics()
        self.best_acc = -1.0
        self.bad_evals = 0
        self.cumulative_time = 0.0
        self._perm_epoch, self._perm = -1, None
        for prev, nxt in zip(self.plans, self.plans[1:]):
            if prev.end_step != nxt.start_step:
                raise TrainingError("stage plans must tile the step range without gaps")

    def plan_at(self, step: int) -> StagePlan:
        return self.plans[bisect.bisect_right(self._starts, step) - 1]

    def _batch_index(self, step: int) -> np.ndarray:
        epoch, k = divmod(step, self.steps_per_epoch)
        if epoch != self._perm_epoch:
            self._perm = T.derive_rng(self.cfg.seed, "shuffle", epoch).permutation(len(self.train_set))
            self._perm_epoch = epoch
        b = self.cfg.batch_size
        return np.sort(self._perm[k * b:(k + 1) * b])

    def _evaluate_split(self, ds, size):
        raw = evaluate(self.model, ds, size, self.mean, self.std)
        ema = evaluate(self.model, ds, size, self.mean, self.std, params=self.ema)
        return raw, ema

    def run(self, max_steps: Optional[int] = None) -> Metrics:
        cfg = self.cfg
        stop = self.total_steps if max_steps is None else min(self.total_steps, self.step + max_steps)
        while self.step < stop and not self.metrics.stopped_early:
            step = self.step
            plan = self.plan_at(step)
            t0 = time.perf_counter()
            idx = self._batch_index(step)
            x, y = prepare_batch(self.train_set.images[idx], self.train_set.labels[idx], self.train_set.num_classes,
                                 plan.image_size, plan.regs, cfg, self.mean, self.std, cfg.seed, step)
            lr = lr_at(step, cfg, self.steps_per_epoch, self.total_steps)
            ctx = ForwardContext(True, T.derive_rng(cfg.seed, "forward", step), plan.regs.dropout,
                                 cfg.stochastic_depth_survival, cfg.bn_momentum)
            try:
                loss = train_step(self.model, x, y, ctx, self.opt_state, lr, cfg)
            except (DivergenceError, T.NonFiniteError) as e:
                raise DivergenceError(f"step {step}: {e}") from e
            ema_update(self.ema, {k: p.data for k, p in self.model.named_parameters()}, ema_decay_at(step, cfg))
            dt = time.perf_counter() - t0
            self.cumulative_time += dt
            row = {
                "step": step, "epoch": step // self.steps_per_epoch, "stage": plan.stage_index,
                "image_size": plan.image_size, "dropout": float(plan.regs.dropout),
                "randaug": float(plan.regs.randaug), "mixup": float(plan.regs.mixup), "lr": float(lr),
                "train_loss": loss, "minival_acc": None, "minival_ema_acc": None, "eval_acc": None,
                "eval_ema_acc": None, "step_time": dt, "cumulative_time": self.cumulative_time,
            }
            self.step += 1
            last = self.step == self.total_steps
            if self.minival is not None and len(self.minival) and (self.step % self.eval_every == 0 or last):
                row["minival_acc"], row["minival_ema_acc"] = self._evaluate_split(self.minival, plan.image_size)
                self._early_stopping(row["minival_acc"])
            if last and self.eval_set is not None and len(self.eval_set):
                row["eval_acc"], row["eval_ema_acc"] = self._evaluate_split(self.eval_set, plan.image_size)
            self.metrics.rows.append(row)
            if self.out_dir is not None and self.checkpoint_every and self.step % self.checkpoint_every == 0:
                self.save(self.out_dir / "checkpoint.efv2")
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.metrics.to_csv(self.out_dir / "metrics.csv")
        return self.metrics

    def _early_stopping(self, acc: float) -> None:
        if acc > self.best_acc:
            self.best_acc, self.bad_evals = acc, 0
            return
        self.bad_evals += 1
        if self.cfg.early_stopping_patience and self.bad_evals >= self.cfg.early_stopping_patience:
            self.metrics.stopped_early = True

    # checkpointing

    def checkpoint(self) -> Checkpoint:
        tensors = {}
        for k, v in self.model.state().items():
            tensors[k] = v
        for k, (acc, mom) in self.opt_state.items():
            tensors[f"opt/acc/{k}"] = acc
            tensors[f"opt/mom/{k}"] = mom
        for k, v in self.ema.items():
            tensors[f"ema/{k}"] = v
        state = {
            "rng": {"bit_generator": "Philox", "seed": self.cfg.seed, "streams": "derived from (seed, purpose, step)"},
            "best_acc": self.best_acc, "bad_evals": self.bad_evals, "stopped_early": self.metrics.stopped_early,
            "cumulative_time": self.cumulative_time, "metrics": self.metrics.rows,
        }
        return Checkpoint(self.step, tensors, state)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, self.checkpoint())

    def restore(self, ckpt: Checkpoint) -> None:
        if ckpt.state.get("rng", {}).get("seed") != self.cfg.seed:
            raise CheckpointError("checkpoint was written with a different seed")
        model_state, opt, ema = {}, {}, {}
        for k, v in ckpt.tensors.items():
            if k.startswith("opt/"):
                _, slot, name = k.split("/", 2)
                opt.setdefault(name, {})[slot] = v
            elif k.startswith("ema/"):
                ema[k[4:]] = v
            else:
                model_state[k] = v
        self.model.load_state(model_state)
        self.opt_state = {k: (v["acc"], v["mom"]) for k, v in opt.items()}
        self.ema = ema
        self.step = ckpt.step
        self.best_acc, self.bad_evals = ckpt.state["best_acc"], ckpt.state["bad_evals"]
        self.cumulative_time = ckpt.state["cumulative_time"]
        self.metrics = Metrics(list(ckpt.state["metrics"]), ckpt.state["stopped_early"])

    def load(self, path) -> None:
        self.restore(load_checkpoint(path))


def train(model: Network, train_set: Dataset, plans: list, cfg: TrainConfig, minival: Optional[Dataset] = None,
          eval_set: Optional[Dataset] = None, out_dir=None, checkpoint_every: int = 0) -> Metrics:
    return Trainer(model, train_set, plans, cfg, minival, eval_set, out_dir, checkpoint_every).run()


# -- finetuning -----------------------------------------------------------


@dataclass
class FinetuneConfig:
    steps: int = 500  # desk-scale stand-in for 10,000
    batch_size: int = 32
    lr: float = 0.001
    image_size: int = 32
    cutout_size: int = 8
    dropout: float = 0.0
    seed: int = 0


def finetune_train_config(ft: FinetuneConfig, steps_per_epoch: int) -> TrainConfig:
    return TrainConfig(
        epochs=ft.steps / steps_per_epoch, batch_size=ft.batch_size, lr_peak=ft.lr, warmup_epochs=0.0,
        lr_schedule="cosine", weight_decay=0.0, cutout_size=ft.cutout_size, seed=ft.seed,
    )


def finetune(model: Network, train_set: Dataset, ft: FinetuneConfig, minival: Optional[Dataset] = None,
             eval_set: Optional[Dataset] = None, out_dir=None) -> Metrics:
    """Fixed-step training with cosine LR from ``ft.lr`` to 0, no weight decay, cutout on."""
    cfg = finetune_train_config(ft, max(1, len(train_set) // ft.batch_size))
    plan = StagePlan(0, ft.image_size, Regularization(dropout=ft.dropout), ft.steps, 0)
    return Trainer(model, train_set, [plan], cfg, minival, eval_set, out_dir).run()


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def with_overrides(cfg: TrainConfig, **kwargs) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kwargs.items() if v is not None})
