"""Static parameter and FLOP counting.

FLOPs are multiply-accumulates (MACs). Convolutions cost
``h_out * w_out * c_out * c_in * k * k`` (depthwise drops the ``c_in``),
dense layers ``in * out``. Pooling, SE rescaling, activations and residual
adds each cost one op per element touched; inference batch norm is folded
into the preceding conv and costs nothing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .spec import ArchSpec, ArchSpecError, se_units


@dataclass(frozen=True)
class LayerCost:
    name: str
    params: int
    flops: int


@dataclass(frozen=True)
class StageCost:
    name: str
    label: str
    params: int
    flops: int
    out_shape: tuple


@dataclass(frozen=True)
class CostReport:
    arch: str
    image_size: int
    params: int
    flops: int
    per_stage: tuple = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "image_size": self.image_size,
            "params": self.params,
            "flops": self.flops,
            "per_stage": [
                {"name": s.name, "label": s.label, "params": s.params, "flops": s.flops, "out_shape": list(s.out_shape)}
                for s in self.per_stage
            ],
        }


def _conv(cin, cout, k, h, w, stride, depthwise=False):
    ho, wo = math.ceil(h / stride), math.ceil(w / stride)
    params = cout * k * k if depthwise else cout * cin * k * k
    flops = ho * wo * params
    return params, flops, ho, wo


def _bn(c):
    return 2 * c


def _se(c_block, c_in, h, w, se_ratio):
    """Squeeze-excite acting on ``c_block`` channels, squeezed to a width set by ``c_in``."""
    r = se_units(c_in, se_ratio)
    params = c_block * r + r + r * c_block + c_block
    # pool, two dense layers, gate activations, rescale
    flops = h * w * c_block + 2 * c_block * r + r + c_block + h * w * c_block
    return params, flops


def block_cost(op_type, cin, cout, expansion, kernel, stride, se_ratio, h, w):
    """(params, flops, h_out, w_out) of a single MBConv / Fused-MBConv layer."""
    params = flops = 0
    mid = cin * expansion
    if op_type == "MBConv":
        if expansion != 1:
            p, f, _, _ = _conv(cin, mid, 1, h, w, 1)
            params += p + _bn(mid)
            flops += f + h * w * mid
        p, f, ho, wo = _conv(mid, mid, kernel, h, w, stride, depthwise=True)
        params += p + _bn(mid)
        flops += f + ho * wo * mid
        if se_ratio > 0:
            p, f = _se(mid, cin, ho, wo, se_ratio)
            params, flops = params + p, flops + f
        p, f, _, _ = _conv(mid, cout, 1, ho, wo, 1)
        params += p + _bn(cout)
        flops += f
    elif op_type == "FusedMBConv":
        if expansion != 1:
            p, f, ho, wo = _conv(cin, mid, kernel, h, w, stride)
            params += p + _bn(mid)
            flops += f + ho * wo * mid
            if se_ratio > 0:
                p, f = _se(mid, cin, ho, wo, se_ratio)
                params, flops = params + p, flops + f
            p, f, _, _ = _conv(mid, cout, 1, ho, wo, 1)
            params += p + _bn(cout)
            flops += f
        else:
            p, f, ho, wo = _conv(cin, cout, kernel, h, w, stride)
            params += p + _bn(cout)
            flops += f + ho * wo * cout
            if se_ratio > 0:
                p, f = _se(cout, cin, ho, wo, se_ratio)
                params, flops = params + p, flops + f
    else:
        raise ArchSpecError(f"not a block op: {op_type}")
    if stride == 1 and cin == cout:
        flops += ho * wo * cout
    return params, flops, ho, wo


def _check(arch: ArchSpec) -> None:
    try:
        arch.validate()
    except ArchSpecError:
        raise
    except Exception as exc:  # malformed field types
        raise ArchSpecError(f"inconsistent spec: {exc}") from exc


def analyze(arch: ArchSpec, image_size: int | None = None) -> CostReport:
    """Per-stage and total parameters and MACs at ``image_size``."""
    _check(arch)
    size = arch.default_image_size if image_size is None else image_size
    if size < 32:
        raise ValueError(f"image_size must be >= 32, got {size}")
    stages = []
    h = w = size

    stem = arch.stem
    p, f, h, w = _conv(arch.in_channels, stem.out_channels, stem.kernel, h, w, stem.stride)
    p += _bn(stem.out_channels)
    f += h * w * stem.out_channels
    stages.append(StageCost("stem", stem.label(), p, f, (stem.out_channels, h, w)))

    cin = stem.out_channels
    for i, stage in enumerate(arch.stages):
        sp = sf = 0
        for layer in range(stage.num_layers):
            stride = stage.stride if layer == 0 else 1
            p, f, h, w = block_cost(
                stage.op_type, cin, stage.out_channels, stage.expansion_ratio, stage.kernel, stride, stage.se_ratio, h, w
            )
            sp, sf = sp + p, sf + f
            cin = stage.out_channels
        stages.append(StageCost(f"stage{i + 1}", stage.label(), sp, sf, (cin, h, w)))

    head = arch.head
    p, f, _, _ = _conv(cin, head.out_channels, 1, h, w, 1)
    p += _bn(head.out_channels)
    f += h * w * head.out_channels  # activation
    f += h * w * head.out_channels  # pooling
    p += head.out_channels * arch.num_classes + arch.num_classes
    f += head.out_channels * arch.num_classes
    stages.append(StageCost("head", head.label(), p, f, (arch.num_classes,)))

    return CostReport(
        arch=arch.name,
        image_size=size,
        params=sum(s.params for s in stages),
        flops=sum(s.flops for s in stages),
        per_stage=tuple(stages),
    )


def count_params(arch: ArchSpec) -> CostReport:
    return analyze(arch, max(arch.default_image_size, 32))


def count_flops(arch: ArchSpec, image_size: int) -> CostReport:
    return analyze(arch, image_size)


def activation_bytes(arch: ArchSpec, image_size: int, batch: int, bytes_per_value: int = 4) -> int:
    """Rough training-memory estimate: every layer's output kept for backward.

    Each block stores its expanded activations a handful of times (conv, BN,
    activation outputs and the im2col buffers), hence the factor of 6.
    """
    h = w = math.ceil(image_size / arch.stem.stride)
    total = arch.stem.out_channels * h * w * 3
    cin = arch.stem.out_channels
    for stage in arch.stages:
        for layer in range(stage.num_layers):
            stride = stage.stride if layer == 0 else 1
            mid = cin * stage.expansion_ratio
            h_in, w_in = h, w
            h, w = math.ceil(h / stride), math.ceil(w / stride)
            total += 6 * mid * h * w + stage.kernel**2 * cin * h_in * w_in
            cin = stage.out_channels
    total += arch.head.out_channels * h * w * 3
    return int(total * batch * bytes_per_value)
