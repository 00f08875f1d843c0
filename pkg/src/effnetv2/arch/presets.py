"""Named architectures: EfficientNetV2-S, the EfficientNet-B0..B7 baselines,
the fused-stage ablation of B4, and small desk-scale variants."""

from __future__ import annotations

from dataclasses import replace

from .spec import ArchSpec, BlockSpec, ScalingCoeffs, fuse_stages, round_channels, scale

MB, FU = "MBConv", "FusedMBConv"


def efficientnetv2_s(num_classes: int = 1000) -> ArchSpec:
    stages = (
        BlockSpec(FU, 24, expansion_ratio=1, kernel=3, stride=1, num_layers=2),
        BlockSpec(FU, 48, expansion_ratio=4, kernel=3, stride=2, num_layers=4),
        BlockSpec(FU, 64, expansion_ratio=4, kernel=3, stride=2, num_layers=4),
        BlockSpec(MB, 128, expansion_ratio=4, kernel=3, stride=2, num_layers=6, se_ratio=0.25),
        BlockSpec(MB, 160, expansion_ratio=6, kernel=3, stride=1, num_layers=9, se_ratio=0.25),
        BlockSpec(MB, 256, expansion_ratio=6, kernel=3, stride=2, num_layers=15, se_ratio=0.25),
    )
    return ArchSpec(
        name="efficientnetv2-s",
        stem=BlockSpec("Conv", 24, kernel=3, stride=2),
        stages=stages,
        head=BlockSpec("Head", 1280, kernel=1),
        num_classes=num_classes,
        # training tops out at 300, roughly 20% below inference
        default_image_size=384,
    )


# approximations: only -S has a published stage table
_V2_SCALING = {
    "m": ScalingCoeffs(width_mult=1.2, depth_mult=1.5, image_size=480, late_stage_extra_layers=(0, 0, 0, 0, 2, 4)),
    "l": ScalingCoeffs(width_mult=1.6, depth_mult=1.9, image_size=480, late_stage_extra_layers=(0, 0, 0, 0, 4, 6)),
}


def efficientnetv2(variant: str = "s", num_classes: int = 1000) -> ArchSpec:
    variant = variant.lower()
    base = efficientnetv2_s(num_classes)
    if variant == "s":
        return base
    if variant not in _V2_SCALING:
        raise ValueError(f"unknown EfficientNetV2 variant {variant!r}")
    return scale(base, _V2_SCALING[variant], name=f"efficientnetv2-{variant}")


def _efficientnet_b0_stages() -> tuple:
    return (
        BlockSpec(MB, 16, expansion_ratio=1, kernel=3, stride=1, num_layers=1, se_ratio=0.25),
        BlockSpec(MB, 24, expansion_ratio=6, kernel=3, stride=2, num_layers=2, se_ratio=0.25),
        BlockSpec(MB, 40, expansion_ratio=6, kernel=5, stride=2, num_layers=2, se_ratio=0.25),
        BlockSpec(MB, 80, expansion_ratio=6, kernel=3, stride=2, num_layers=3, se_ratio=0.25),
        BlockSpec(MB, 112, expansion_ratio=6, kernel=5, stride=1, num_layers=3, se_ratio=0.25),
        BlockSpec(MB, 192, expansion_ratio=6, kernel=5, stride=2, num_layers=4, se_ratio=0.25),
        BlockSpec(MB, 320, expansion_ratio=6, kernel=3, stride=1, num_layers=1, se_ratio=0.25),
    )


# (width, depth, resolution)
EFFICIENTNET_V1_COEFFS = {
    "b0": (1.0, 1.0, 224),
    "b1": (1.0, 1.1, 240),
    "b2": (1.1, 1.2, 260),
    "b3": (1.2, 1.4, 300),
    "b4": (1.4, 1.8, 380),
    "b5": (1.6, 2.2, 456),
    "b6": (1.8, 2.6, 528),
    "b7": (2.0, 3.1, 600),
}


def efficientnet_v1(variant: str = "b0", num_classes: int = 1000) -> ArchSpec:
    """EfficientNet-B0..B7 with their published compound-scaling coefficients.

    The V1 family predates the 480 pixel cap, so the resolution is applied
    directly rather than through :func:`scale`.
    """
    key = variant.lower()
    if key not in EFFICIENTNET_V1_COEFFS:
        raise ValueError(f"unknown EfficientNet variant {variant!r}; expected one of b0..b7")
    width, depth, res = EFFICIENTNET_V1_COEFFS[key]
    base = ArchSpec(
        name=f"efficientnet-{key}",
        stem=BlockSpec("Conv", 32, kernel=3, stride=2),
        stages=_efficientnet_b0_stages(),
        head=BlockSpec("Head", 1280, kernel=1),
        num_classes=num_classes,
        default_image_size=224,
    )
    scaled = scale(base, ScalingCoeffs(width_mult=width, depth_mult=depth), name=base.name)
    return replace(scaled, default_image_size=res)


B4_FUSED_ROWS = {
    "b4": (),
    "b4-fused1-3": (1, 2, 3),
    "b4-fused1-5": (1, 2, 3, 4, 5),
    "b4-fused1-7": (1, 2, 3, 4, 5, 6, 7),
}


def efficientnet_b4_fused(stages, num_classes: int = 1000) -> ArchSpec:
    base = efficientnet_v1("b4", num_classes)
    if not stages:
        return base
    label = f"efficientnet-b4-fused{min(stages)}-{max(stages)}"
    return fuse_stages(base, stages, name=label)


def tiny(num_classes: int = 10) -> ArchSpec:
    """Desk-scale V2-style network (well under 1M parameters)."""
    stages = (
        BlockSpec(FU, 16, expansion_ratio=1, kernel=3, stride=1, num_layers=1),
        BlockSpec(FU, 24, expansion_ratio=4, kernel=3, stride=2, num_layers=1),
        BlockSpec(FU, 32, expansion_ratio=4, kernel=3, stride=2, num_layers=1),
        BlockSpec(MB, 64, expansion_ratio=4, kernel=3, stride=2, num_layers=2, se_ratio=0.25),
        BlockSpec(MB, 96, expansion_ratio=6, kernel=3, stride=1, num_layers=2, se_ratio=0.25),
        BlockSpec(MB, 128, expansion_ratio=6, kernel=3, stride=2, num_layers=2, se_ratio=0.25),
    )
    return ArchSpec(
        name="efficientnetv2-tiny",
        stem=BlockSpec("Conv", 16, kernel=3, stride=2),
        stages=stages,
        head=BlockSpec("Head", 512, kernel=1),
        num_classes=num_classes,
        default_image_size=32,
    )


def nano(num_classes: int = 10) -> ArchSpec:
    """Four-stage backbone used by the desk-scale architecture search."""
    stages = (
        BlockSpec(FU, 16, expansion_ratio=1, kernel=3, stride=1, num_layers=1),
        BlockSpec(FU, 24, expansion_ratio=4, kernel=3, stride=2, num_layers=1),
        BlockSpec(MB, 40, expansion_ratio=4, kernel=3, stride=2, num_layers=1, se_ratio=0.25),
        BlockSpec(MB, 64, expansion_ratio=6, kernel=3, stride=2, num_layers=1, se_ratio=0.25),
    )
    return ArchSpec(
        name="efficientnetv2-nano",
        stem=BlockSpec("Conv", 16, kernel=3, stride=2),
        stages=stages,
        head=BlockSpec("Head", 256, kernel=1),
        num_classes=num_classes,
        default_image_size=32,
    )


def _registry() -> dict:
    table = {
        "v2-s": lambda: efficientnetv2("s"),
        "v2-m": lambda: efficientnetv2("m"),
        "v2-l": lambda: efficientnetv2("l"),
        "tiny": tiny,
        "nano": nano,
    }
    for key in EFFICIENTNET_V1_COEFFS:
        table[key] = lambda key=key: efficientnet_v1(key)
    for key, stages in B4_FUSED_ROWS.items():
        if stages:
            table[key] = lambda stages=stages: efficientnet_b4_fused(stages)
    return table


PRESETS = _registry()


def get_preset(name: str) -> ArchSpec:
    try:
        return PRESETS[name.lower()]()
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; known: {', '.join(sorted(PRESETS))}") from None


__all__ = [
    "PRESETS",
    "get_preset",
    "efficientnetv2_s",
    "efficientnetv2",
    "efficientnet_v1",
    "efficientnet_b4_fused",
    "tiny",
    "nano",
    "round_channels",
]
