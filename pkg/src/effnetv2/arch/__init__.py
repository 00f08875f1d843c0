"""Architecture descriptions, presets, scaling and static cost analysis."""

from .cost import CostReport, StageCost, activation_bytes, analyze, count_flops, count_params
from .presets import (
    PRESETS,
    efficientnet_b4_fused,
    efficientnet_v1,
    efficientnetv2,
    efficientnetv2_s,
    get_preset,
    nano,
    tiny,
)
from .model import ForwardContext, Network, instantiate, is_decayed
from .spec import (
    ArchSpec,
    ArchSpecError,
    BlockSpec,
    ScalingCoeffs,
    fuse_stages,
    round_channels,
    scale,
    se_units,
    with_classes,
)

__all__ = [
    "ArchSpec", "ArchSpecError", "BlockSpec", "ScalingCoeffs", "CostReport", "StageCost",
    "PRESETS", "get_preset", "efficientnetv2_s", "efficientnetv2", "efficientnet_v1",
    "efficientnet_b4_fused", "tiny", "nano", "scale", "fuse_stages", "round_channels",
    "se_units", "with_classes", "ForwardContext", "Network", "instantiate", "is_decayed", "analyze", "count_params", "count_flops", "activation_bytes",
]
