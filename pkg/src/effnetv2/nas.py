"""Training-aware random search over a stage-factorised space around a backbone."""

from __future__ import annotations

import json
import math
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .arch import ArchSpec, BlockSpec, activation_bytes, count_params, get_preset, instantiate, with_classes
from .arch.model import ForwardContext
from .data import Dataset
from .schedule import Regularization, StagePlan
from .trainer import DivergenceError, TrainConfig, Trainer, train_step

REWARD_W = -0.07
REWARD_V = -0.05


class MemoryBudgetError(RuntimeError):
    pass


@dataclass(frozen=True)
class RewardParams:
    w: float = REWARD_W
    v: float = REWARD_V

    def __post_init__(self):
        if not (self.w < 0 and self.v < 0):
            raise ValueError(f"reward exponents must be negative, got w={self.w}, v={self.v}")


def reward(A: float, S: float, P: float, params: RewardParams = RewardParams()) -> float:
    """A * S**w * P**v for accuracy fraction A and backbone-normalised step time S and params P."""
    if not 0 <= A <= 1:
        raise ValueError(f"accuracy must be a fraction in [0, 1], got {A}")
    if not S > 0 or not P > 0:
        raise ValueError(f"normalised step time and params must be > 0, got S={S}, P={P}")
    return A * S ** params.w * P ** params.v


# -- search space ---------------------------------------------------------


@dataclass(frozen=True)
class StageChoices:
    op_types: tuple
    kernels: tuple
    expansions: tuple
    layers: tuple


@dataclass(frozen=True)
class SearchSpace:
    """Per-stage choice lists; channels and strides always come from the backbone."""

    backbone: ArchSpec
    stages: tuple

    @classmethod
    def around(cls, backbone: ArchSpec, layer_delta: int = 2, op_types=("MBConv", "FusedMBConv"),
               kernels=(3, 5), expansions=(1, 4, 6)) -> "SearchSpace":
        stages = tuple(
            StageChoices(tuple(op_types), tuple(kernels), tuple(expansions),
                         tuple(range(max(1, s.num_layers - layer_delta), s.num_layers + layer_delta + 1)))
            for s in backbone.stages
        )
        return cls(backbone, stages)

    @classmethod
    def singleton(cls, backbone: ArchSpec) -> "SearchSpace":
        return cls(backbone, tuple(StageChoices((s.op_type,), (s.kernel,), (s.expansion_ratio,), (s.num_layers,))
                                   for s in backbone.stages))


def _stage(base: BlockSpec, op: str, kernel: int, expansion: int, layers: int) -> BlockSpec:
    if op == base.op_type:
        se = base.se_ratio
    else:
        se = 0.25 if op == "MBConv" else 0.0
    return replace(base, op_type=op, kernel=kernel, expansion_ratio=expansion, num_layers=layers, se_ratio=se)


def sample_arch(space: SearchSpace, rng: np.random.Generator, name: str = "candidate") -> ArchSpec:
    """Independent uniform choice of every factor in every stage."""
    stages = []
    for base, ch in zip(space.backbone.stages, space.stages):
        op = ch.op_types[int(rng.integers(len(ch.op_types)))]
        kernel = ch.kernels[int(rng.integers(len(ch.kernels)))]
        expansion = ch.expansions[int(rng.integers(len(ch.expansions)))]
        layers = ch.layers[int(rng.integers(len(ch.layers)))]
        stages.append(_stage(base, op, kernel, expansion, layers))
    arch = replace(space.backbone, name=name, stages=tuple(stages))
    arch.validate()
    return arch


# -- candidates -----------------------------------------------------------


@dataclass
class Candidate:
    arch: ArchSpec
    index: int = -1
    seed: int = 0
    A: Optional[float] = None
    S: Optional[float] = None
    P: Optional[float] = None
    step_time: Optional[float] = None
    params: Optional[int] = None
    reward: Optional[float] = None
    flags: list = field(default_factory=list)

    def objectives(self) -> tuple:
        return (self.A, self.S, self.P)

    def recompute_reward(self, rp: RewardParams = RewardParams()) -> float:
        return reward(self.A, self.S, self.P, rp)

    def to_record(self) -> dict:
        return {
            "index": self.index, "seed": self.seed, "A": self.A, "S": self.S, "P": self.P,
            "step_time": self.step_time, "params": self.params, "reward": self.reward,
            "flags": list(self.flags), "arch": self.arch.to_dict(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Candidate":
        rec = dict(rec)
        arch = ArchSpec.from_dict(rec.pop("arch"))
        return cls(arch=arch, **rec)


@dataclass
class EvalConfig:
    epochs: float = 3.0
    image_size: int = 64
    batch_size: int = 32
    warmup_epochs: float = 0.5
    lr_peak: Optional[float] = None
    timing_batch: int = 8
    timing_repeats: int = 5
    timing_warmup: int = 2
    memory_budget_bytes: int = 2 * 1024 ** 3
    seed: int = 0


def dominates(a: Candidate, b: Candidate) -> bool:
    """a is at least as good on accuracy (up), step time and params (down), strictly on one."""
    no_worse = a.A >= b.A and a.S <= b.S and a.P <= b.P
    return no_worse and (a.A > b.A or a.S < b.S or a.P < b.P)


def pareto_front(cands: list) -> list:
    return [c for c in cands if not any(dominates(o, c) for o in cands if o is not c)]


# -- measurement ----------------------------------------------------------


def _check_memory(arch: ArchSpec, image_size: int, batch: int, memory_budget_bytes: Optional[int]) -> None:
    if memory_budget_bytes is None:
        return
    need = activation_bytes(arch, image_size, batch)
    if need > memory_budget_bytes:
        raise MemoryBudgetError(f"{arch.name}: ~{need / 2**20:.0f} MiB of activations exceeds the "
                                f"{memory_budget_bytes / 2**20:.0f} MiB budget")


def _step_timer(arch: ArchSpec, image_size: int, batch: int, seed: int):
    """A callable running one full training step on fixed data and returning its wall-clock seconds."""
    model = instantiate(arch, seed)
    rng = T.derive_rng(seed, "timing")
    x = rng.normal(size=(batch, arch.in_channels, image_size, image_size)).astype(T.get_dtype())
    y = rng.integers(arch.num_classes, size=batch)
    cfg = TrainConfig(batch_size=batch, weight_decay=0.0)
    opt: dict = {}
    calls = [0]

    def step() -> float:
        ctx = ForwardContext(True, T.derive_rng(seed, "timing", calls[0]), 0.0, 0.8)
        calls[0] += 1
        t0 = time.perf_counter()
        train_step(model, x, y, ctx, opt, 0.0, cfg)
        return time.perf_counter() - t0

    return step


def measure_step_time(arch: ArchSpec, image_size: int, batch: int = 8, repeats: int = 5, warmup: int = 2,
                      memory_budget_bytes: Optional[int] = 2 * 1024 ** 3, seed: int = 0) -> float:
    """Median wall-clock seconds of full training steps (forward, backward, RMSProp update).

    Configurations whose analytic activation footprint exceeds the budget are rejected up front.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    _check_memory(arch, image_size, batch, memory_budget_bytes)
    step = _step_timer(arch, image_size, batch, seed)
    times = [step() for _ in range(warmup + repeats)]
    return statistics.median(times[warmup:])


def measure_relative_step_time(arch: ArchSpec, reference: ArchSpec, image_size: int, batch: int = 8,
                               repeats: int = 5, warmup: int = 2,
                               memory_budget_bytes: Optional[int] = 2 * 1024 ** 3,
                               seed: int = 0) -> tuple[float, float]:
    """(median step time of ``arch``, that divided by the median step time of ``reference``).

    Steps of the two models alternate, so a machine that speeds up or slows down during the
    measurement affects both medians alike and the ratio stays put.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    _check_memory(arch, image_size, batch, memory_budget_bytes)
    cand = _step_timer(arch, image_size, batch, seed)
    ref = _step_timer(reference, image_size, batch, seed)
    ct, rt = [], []
    for i in range(warmup + repeats):
        a, b = cand(), ref()
        if i >= warmup:
            ct.append(a)
            rt.append(b)
    t = statistics.median(ct)
    return t, t / statistics.median(rt)


def evaluate_candidate(cand: Candidate, train_set: Dataset, minival: Dataset, cfg: EvalConfig,
                       baseline_time: float, baseline_params: int, rp: RewardParams = RewardParams(),
                       baseline_arch: Optional[ArchSpec] = None) -> Candidate:
    """Short training run for A, measured step time for S, parameter count for P.

    With ``baseline_arch`` the step time is measured interleaved with the backbone's and S is
    the ratio of the two; otherwise S is the step time over the fixed ``baseline_time``.
    """
    arch = with_classes(cand.arch, train_set.num_classes)
    cand.params = count_params(arch).params
    cand.P = cand.params / baseline_params
    spe = max(1, len(train_set) // cfg.batch_size)
    steps = max(1, int(round(cfg.epochs * spe)))
    tcfg = TrainConfig(batch_size=cfg.batch_size, warmup_epochs=cfg.warmup_epochs, lr_peak=cfg.lr_peak,
                       epochs=cfg.epochs, seed=cand.seed, eval_every_epochs=cfg.epochs)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            metrics = Trainer(instantiate(arch, cand.seed), train_set,
                              [StagePlan(0, cfg.image_size, Regularization(), steps, 0)], tcfg, minival=minival).run()
        cand.A = metrics.last("minival_acc")
    except DivergenceError:
        cand.A = 1.0 / train_set.num_classes
        cand.flags.append("diverged")
    if baseline_arch is None:
        cand.step_time = measure_step_time(arch, cfg.image_size, cfg.timing_batch, cfg.timing_repeats,
                                           cfg.timing_warmup, cfg.memory_budget_bytes, cand.seed)
        cand.S = cand.step_time / baseline_time
    else:
        cand.step_time, cand.S = measure_relative_step_time(
            arch, baseline_arch, cfg.image_size, cfg.timing_batch, cfg.timing_repeats, cfg.timing_warmup,
            cfg.memory_budget_bytes, cand.seed)
    cand.reward = reward(cand.A, cand.S, cand.P, rp)
    return cand


# -- search ---------------------------------------------------------------


@dataclass
class SearchResult:
    candidates: list  # sorted by reward, best first
    front: list
    baseline_time: float
    baseline_params: int

    @property
    def best(self) -> Candidate:
        return self.candidates[0]


def random_search(space: SearchSpace, budget: int, train_set: Dataset, minival: Dataset, cfg: EvalConfig,
                  trace_path=None, rp: RewardParams = RewardParams(), log=None) -> SearchResult:
    """Evaluate ``budget`` sampled candidates; rank by reward and extract the Pareto front.

    Candidate i is drawn from a stream keyed by (seed, i) and trained with its own derived seed,
    so the trace is reproducible apart from the timing columns. Each candidate's S comes from
    steps interleaved with the backbone's, which keeps it stable when machine speed drifts over
    a long search. Failures (memory budget, divergence) are flagged and the search continues.
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    backbone = with_classes(space.backbone, train_set.num_classes)
    baseline_time = measure_step_time(backbone, cfg.image_size, cfg.timing_batch, cfg.timing_repeats,
                                      cfg.timing_warmup, cfg.memory_budget_bytes, cfg.seed)
    baseline_params = count_params(backbone).params
    writer = None
    if trace_path is not None:
        Path(trace_path).parent.mkdir(parents=True, exist_ok=True)
        writer = open(trace_path, "w")
    done = []
    try:
        for i in range(budget):
            arch = sample_arch(space, T.derive_rng(cfg.seed, "sample", i), name=f"candidate-{i}")
            cand = Candidate(arch, index=i, seed=int(T.derive_rng(cfg.seed, "train", i).integers(2 ** 31)))
            try:
                evaluate_candidate(cand, train_set, minival, cfg, baseline_time, baseline_params, rp, backbone)
            except MemoryBudgetError as e:
                cand.flags.append(f"rejected: {e}")
                cand.params = count_params(with_classes(arch, train_set.num_classes)).params
            done.append(cand)
            if writer is not None:
                writer.write(json.dumps(cand.to_record(), sort_keys=True) + "\n")
                writer.flush()
            if log is not None:
                log(cand)
    finally:
        if writer is not None:
            writer.close()
    scored = [c for c in done if c.reward is not None]
    ranked = sorted(scored, key=lambda c: (-c.reward, c.index)) + [c for c in done if c.reward is None]
    return SearchResult(ranked, pareto_front(scored), baseline_time, baseline_params)


def read_trace(path) -> list:
    with open(path) as f:
        return [Candidate.from_record(json.loads(line)) for line in f if line.strip()]


def default_space() -> SearchSpace:
    return SearchSpace.around(get_preset("nano"))
