"""Declarative network descriptions and their JSON form."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

OP_TYPES = ("MBConv", "FusedMBConv", "Conv", "Head")
BLOCK_OPS = ("MBConv", "FusedMBConv")
EXPANSIONS = (1, 4, 6)
BLOCK_KERNELS = (3, 5)

FORMAT_VERSION = 1


class ArchSpecError(ValueError):
    """The description is inconsistent or malformed."""


@dataclass(frozen=True)
class BlockSpec:
    """One stage of identical blocks (or the stem / head)."""

    op_type: str
    out_channels: int
    expansion_ratio: int = 1
    kernel: int = 3
    stride: int = 1
    num_layers: int = 1
    se_ratio: float = 0.0

    @property
    def is_block(self) -> bool:
        return self.op_type in BLOCK_OPS

    def label(self) -> str:
        if self.op_type == "Conv":
            return f"Conv{self.kernel}x{self.kernel}"
        if self.op_type == "Head":
            return "Conv1x1 & Pooling & FC"
        name = "Fused-MBConv" if self.op_type == "FusedMBConv" else "MBConv"
        text = f"{name}{self.expansion_ratio}, k{self.kernel}x{self.kernel}"
        if self.se_ratio > 0:
            text += f", SE{self.se_ratio:g}"
        return text

    def validate(self, where: str = "block") -> list[str]:
        problems = []
        if self.op_type not in OP_TYPES:
            problems.append(f"{where}: op_type {self.op_type!r} not in {OP_TYPES}")
            return problems
        if not isinstance(self.out_channels, int) or self.out_channels < 1:
            problems.append(f"{where}: out_channels must be a positive int")
        if not isinstance(self.num_layers, int) or self.num_layers < 1:
            problems.append(f"{where}: num_layers must be a positive int")
        if self.stride not in (1, 2):
            problems.append(f"{where}: stride must be 1 or 2")
        if not 0.0 <= self.se_ratio <= 1.0:
            problems.append(f"{where}: se_ratio must be in [0, 1]")
        if self.is_block:
            if self.expansion_ratio not in EXPANSIONS:
                problems.append(f"{where}: expansion_ratio must be one of {EXPANSIONS}")
            if self.kernel not in BLOCK_KERNELS:
                problems.append(f"{where}: kernel must be one of {BLOCK_KERNELS}")
        elif self.op_type == "Conv":
            if self.kernel not in (1, 3, 5):
                problems.append(f"{where}: stem kernel must be 1, 3 or 5")
            if self.num_layers != 1:
                problems.append(f"{where}: stem has exactly one layer")
        else:
            if self.kernel != 1 or self.stride != 1 or self.num_layers != 1:
                problems.append(f"{where}: head is a single stride-1 1x1 conv")
        return problems


@dataclass(frozen=True)
class ArchSpec:
    name: str
    stem: BlockSpec
    stages: tuple
    head: BlockSpec
    num_classes: int = 1000
    default_image_size: int = 224
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))

    def validate(self) -> None:
        problems = []
        if self.stem.op_type != "Conv":
            problems.append("stem: op_type must be 'Conv'")
        problems += self.stem.validate("stem")
        if not self.stages:
            problems.append("stages: at least one stage is required")
        for i, stage in enumerate(self.stages):
            if not stage.is_block:
                problems.append(f"stages[{i}]: op_type must be MBConv or FusedMBConv")
            problems += stage.validate(f"stages[{i}]")
        if self.head.op_type != "Head":
            problems.append("head: op_type must be 'Head'")
        problems += self.head.validate("head")
        if not isinstance(self.num_classes, int) or self.num_classes < 1:
            problems.append("num_classes must be a positive int")
        if not isinstance(self.default_image_size, int) or self.default_image_size < 8:
            problems.append("default_image_size must be an int >= 8")
        if self.in_channels < 1:
            problems.append("in_channels must be positive")
        if problems:
            raise ArchSpecError("; ".join(problems))

    def layers(self):
        """Yield ``(stage_index, layer_index, in_channels, BlockSpec-with-layer-stride)``.

        Only the first layer of a stage carries the stage stride; later layers
        map out_channels to out_channels at stride 1.
        """
        cin = self.stem.out_channels
        for s, stage in enumerate(self.stages):
            for layer in range(stage.num_layers):
                stride = stage.stride if layer == 0 else 1
                yield s, layer, cin, replace(stage, stride=stride, num_layers=1)
                cin = stage.out_channels

    @property
    def total_stride(self) -> int:
        return self.stem.stride * math.prod(s.stride for s in self.stages)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "name": self.name,
            "num_classes": self.num_classes,
            "default_image_size": self.default_image_size,
            "in_channels": self.in_channels,
            "stem": asdict(self.stem),
            "stages": [asdict(s) for s in self.stages],
            "head": asdict(self.head),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "ArchSpec":
        from . import schema

        schema.validate_arch_dict(data)
        spec = cls(
            name=data["name"],
            stem=BlockSpec(**data["stem"]),
            stages=tuple(BlockSpec(**s) for s in data["stages"]),
            head=BlockSpec(**data["head"]),
            num_classes=data.get("num_classes", 1000),
            default_image_size=data.get("default_image_size", 224),
            in_channels=data.get("in_channels", 3),
        )
        spec.validate()
        return spec

    @classmethod
    def from_json(cls, text: str) -> "ArchSpec":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ArchSpecError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
        return cls.from_dict(data)


def se_units(in_channels: int, se_ratio: float) -> int:
    """Squeeze width of an SE block, based on the block's input channels."""
    return max(1, int(in_channels * se_ratio + 0.5))


def round_channels(channels: float, width_mult: float = 1.0, divisor: int = 8) -> int:
    """Scale and round to the nearest multiple of ``divisor``, never below it.

    As in the EfficientNet family, rounding down by more than 10% bumps the
    result up one multiple.
    """
    scaled = channels * width_mult
    rounded = max(divisor, int(scaled + divisor / 2) // divisor * divisor)
    if rounded < 0.9 * scaled:
        rounded += divisor
    return int(rounded)


@dataclass(frozen=True)
class ScalingCoeffs:
    width_mult: float = 1.0
    depth_mult: float = 1.0
    max_image_size: int = 480
    image_size: Optional[int] = None
    late_stage_extra_layers: Sequence[int] = field(default_factory=tuple)

    def __post_init__(self):
        if self.width_mult < 1.0 or self.depth_mult < 1.0:
            raise ValueError("scaling coefficients must be >= 1")
        if self.max_image_size > 480:
            raise ValueError("max_image_size is capped at 480")
        if any(e < 0 for e in self.late_stage_extra_layers):
            raise ValueError("late_stage_extra_layers must be non-negative")


def scale(arch: ArchSpec, coeffs: ScalingCoeffs, name: Optional[str] = None) -> ArchSpec:
    """Compound-scale width, depth and resolution.

    Channels go through :func:`round_channels`, layer counts are multiplied by
    ``depth_mult`` and rounded up, then ``late_stage_extra_layers[i]`` is added
    to stage ``i``. The image size is clamped to ``max_image_size``.
    """
    extra = list(coeffs.late_stage_extra_layers) + [0] * (len(arch.stages) - len(coeffs.late_stage_extra_layers))
    if len(extra) > len(arch.stages):
        raise ValueError("late_stage_extra_layers has more entries than stages")

    def widen(block: BlockSpec) -> BlockSpec:
        return replace(block, out_channels=round_channels(block.out_channels, coeffs.width_mult))

    stages = tuple(
        replace(widen(s), num_layers=int(math.ceil(s.num_layers * coeffs.depth_mult - 1e-9)) + extra[i])
        for i, s in enumerate(arch.stages)
    )
    size = coeffs.image_size if coeffs.image_size is not None else arch.default_image_size
    return replace(
        arch,
        name=name or arch.name,
        stem=widen(arch.stem),
        stages=stages,
        head=widen(arch.head),
        default_image_size=min(size, coeffs.max_image_size),
    )


def fuse_stages(
    arch: ArchSpec, stages: Sequence[int], name: Optional[str] = None, keep_se: bool = False
) -> ArchSpec:
    """Swap MBConv for Fused-MBConv in the given 1-based block stages.

    Expansion, kernel, channels and layers are kept. Fused blocks drop their
    squeeze-excite unless ``keep_se`` is set, matching the fused stages of
    EfficientNetV2-S.
    """
    chosen = set(stages)
    for idx in chosen:
        if not 1 <= idx <= len(arch.stages):
            raise IndexError(f"stage {idx} out of range 1..{len(arch.stages)}")
    new = tuple(
        replace(s, op_type="FusedMBConv", se_ratio=s.se_ratio if keep_se else 0.0) if (i + 1) in chosen and s.op_type == "MBConv" else s
        for i, s in enumerate(arch.stages)
    )
    return replace(arch, name=name or arch.name, stages=new)


def with_classes(arch: ArchSpec, num_classes: int) -> ArchSpec:
    return replace(arch, num_classes=num_classes)
