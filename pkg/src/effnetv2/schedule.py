"""Progressive learning with adaptive regularization, plus the baseline size schedules."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional

import numpy as np

SIZE_GRANULARITY = 8
MODES = ("fixed", "progressive_adaptive", "progressive_vanilla", "random_resize", "random_resize_adaptive")


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class Regularization:
    dropout: float = 0.0
    randaug: float = 0.0
    mixup: float = 0.0

    def problems(self, where="") -> list[str]:
        out = []
        if not (math.isfinite(self.dropout) and 0 <= self.dropout < 1):
            out.append(f"{where}dropout must be in [0, 1), got {self.dropout}")
        if not (math.isfinite(self.randaug) and 0 <= self.randaug <= 30):
            out.append(f"{where}randaug must be in [0, 30], got {self.randaug}")
        if not (math.isfinite(self.mixup) and self.mixup >= 0):
            out.append(f"{where}mixup must be finite and >= 0, got {self.mixup}")
        return out

    def items(self):
        return asdict(self).items()


def _lerp(a: float, b: float, t: float) -> float:
    # exact at both ends, which a + (b - a) * t is not in floating point
    if t <= 0:
        return a
    if t >= 1:
        return b
    return a + (b - a) * t


def lerp_regs(lo: Regularization, hi: Regularization, t: float) -> Regularization:
    return Regularization(*(_lerp(a, b, t) for a, b in zip(asdict(lo).values(), asdict(hi).values())))


def round_size(size: float, lo: int, hi: int) -> int:
    """Nearest multiple of 8 (halves round up), clamped to [lo, hi]."""
    snapped = int(math.floor(size / SIZE_GRANULARITY + 0.5)) * SIZE_GRANULARITY
    return min(max(snapped, lo), hi)


@dataclass(frozen=True)
class StageSchedule:
    total_steps: int
    num_stages: int = 4
    size_min: int = 128
    size_max: int = 300
    reg_min: Regularization = field(default_factory=Regularization)
    reg_max: Regularization = field(default_factory=Regularization)

    def problems(self) -> list[str]:
        out = []
        if self.total_steps <= 0:
            out.append(f"total_steps must be > 0, got {self.total_steps}")
        if self.num_stages < 1:
            out.append(f"num_stages must be >= 1, got {self.num_stages}")
        elif self.num_stages > self.total_steps > 0:
            out.append(f"num_stages ({self.num_stages}) exceeds total_steps ({self.total_steps})")
        if self.size_min < 8:
            out.append(f"size_min must be >= 8, got {self.size_min}")
        if self.size_min > self.size_max:
            out.append(f"size_min ({self.size_min}) exceeds size_max ({self.size_max})")
        out += self.reg_min.problems("reg_min.") + self.reg_max.problems("reg_max.")
        for k, lo in self.reg_min.items():
            hi = getattr(self.reg_max, k)
            if lo > hi:
                out.append(f"reg_min.{k} ({lo}) exceeds reg_max.{k} ({hi})")
        return out

    def validate(self) -> "StageSchedule":
        problems = self.problems()
        if problems:
            raise ScheduleError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "StageSchedule":
        data = dict(data)
        for key in ("reg_min", "reg_max"):
            if key in data:
                data[key] = Regularization(**data[key])
        return cls(**data)


@dataclass(frozen=True)
class StagePlan:
    stage_index: int
    image_size: int
    regs: Regularization
    steps: int
    start_step: int = 0

    @property
    def end_step(self) -> int:
        return self.start_step + self.steps

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(d.pop("regs"))
        return d


def _stage_steps(total: int, m: int) -> list[int]:
    base = total // m
    return [base] * (m - 1) + [total - base * (m - 1)]


def _plans(cfg: StageSchedule, adaptive: bool) -> list[StagePlan]:
    cfg.validate()
    m = cfg.num_stages
    plans, start = [], 0
    for i, steps in enumerate(_stage_steps(cfg.total_steps, m)):
        if m == 1:
            size, regs = cfg.size_max, cfg.reg_max
        else:
            t = i / (m - 1)
            if i == 0:
                size = cfg.size_min
            elif i == m - 1:
                size = cfg.size_max
            else:
                size = round_size(_lerp(cfg.size_min, cfg.size_max, t), cfg.size_min, cfg.size_max)
            regs = lerp_regs(cfg.reg_min, cfg.reg_max, t) if adaptive else cfg.reg_max
        plans.append(StagePlan(i, size, regs, steps, start))
        start += steps
    return plans


def make_schedule(cfg: StageSchedule) -> list[StagePlan]:
    """Size and every regularizer interpolated linearly from (S0, Phi0) to (Se, Phie) over M stages."""
    return _plans(cfg, adaptive=True)


def vanilla_progressive(cfg: StageSchedule) -> list[StagePlan]:
    """Same sizes as :func:`make_schedule`, but every stage uses the final regularization."""
    return _plans(cfg, adaptive=False)


def fixed_schedule(cfg: StageSchedule) -> list[StagePlan]:
    """Baseline: one stage at the final size and regularization for all N steps."""
    cfg.validate()
    return [StagePlan(0, cfg.size_max, cfg.reg_max, cfg.total_steps, 0)]


def size_choices(lo: int, hi: int) -> list[int]:
    if lo == hi:
        return [lo]
    grid = list(range(-(-lo // SIZE_GRANULARITY) * SIZE_GRANULARITY, hi + 1, SIZE_GRANULARITY))
    return grid or [lo, hi]


def random_resize(cfg: StageSchedule, resample_every_epochs: int = 8, rng=None, adaptive: bool = False,
                  steps_per_epoch: int = 1) -> Iterator[StagePlan]:
    """Stream of plans with a size redrawn uniformly from the multiples of 8 in [S0, Se].

    Each plan covers ``resample_every_epochs * steps_per_epoch`` steps (the last one is cut to
    end at N). Regularization is the final one, or for ``adaptive`` interpolated by the size
    fraction (S - S0) / (Se - S0).
    """
    cfg.validate()
    if resample_every_epochs < 1 or steps_per_epoch < 1:
        raise ScheduleError("resample_every_epochs and steps_per_epoch must be >= 1")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    choices = size_choices(cfg.size_min, cfg.size_max)
    span = resample_every_epochs * steps_per_epoch
    start, i = 0, 0
    while start < cfg.total_steps:
        size = choices[int(rng.integers(len(choices)))]
        if adaptive and cfg.size_max > cfg.size_min:
            regs = lerp_regs(cfg.reg_min, cfg.reg_max, (size - cfg.size_min) / (cfg.size_max - cfg.size_min))
        else:
            regs = cfg.reg_max
        steps = min(span, cfg.total_steps - start)
        yield StagePlan(i, size, regs, steps, start)
        start += steps
        i += 1


def plans_for_mode(mode: str, cfg: StageSchedule, steps_per_epoch: int = 1, seed: int = 0,
                   resample_every_epochs: int = 8) -> list[StagePlan]:
    if mode == "fixed":
        return fixed_schedule(cfg)
    if mode == "progressive_adaptive":
        return make_schedule(cfg)
    if mode == "progressive_vanilla":
        return vanilla_progressive(cfg)
    if mode in ("random_resize", "random_resize_adaptive"):
        return list(random_resize(cfg, resample_every_epochs, np.random.default_rng(seed),
                                  mode.endswith("adaptive"), steps_per_epoch))
    raise ScheduleError(f"unknown schedule mode {mode!r}; expected one of {', '.join(MODES)}")


# Minimum and maximum (image size, regularization) of the progressive runs per model size.
PROGRESSIVE_PRESETS = {
    "v2-s": (128, 300, Regularization(0.1, 5, 0), Regularization(0.3, 15, 0)),
    "v2-m": (128, 380, Regularization(0.1, 5, 0), Regularization(0.4, 20, 0.2)),
    "v2-l": (128, 380, Regularization(0.1, 5, 0), Regularization(0.5, 25, 0.4)),
}


def preset_schedule(name: str, total_steps: int, num_stages: int = 4) -> StageSchedule:
    try:
        s0, se, r0, re = PROGRESSIVE_PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown schedule preset {name!r}; known: {', '.join(PROGRESSIVE_PRESETS)}") from None
    return StageSchedule(total_steps, num_stages, s0, se, r0, re).validate()


def format_plans(plans: list[StagePlan]) -> str:
    rows = [("stage", "steps", "start", "size", "dropout", "randaug", "mixup")]
    for p in plans:
        rows.append((str(p.stage_index), str(p.steps), str(p.start_step), str(p.image_size),
                     f"{p.regs.dropout:.4g}", f"{p.regs.randaug:.4g}", f"{p.regs.mixup:.4g}"))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows)
