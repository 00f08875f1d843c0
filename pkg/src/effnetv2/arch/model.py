"""Runnable networks built from an :class:`ArchSpec`."""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .. import tensor as T
from ..tensor import Tensor
from .spec import ArchSpec, se_units, with_classes


@dataclass
class ForwardContext:
    training: bool = False
    rng: Optional[np.random.Generator] = None
    dropout_rate: float = 0.0
    survival_prob: float = 1.0
    bn_momentum: float = 0.99


class Module:
    """Container of named parameters, buffers and child modules."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _conv_init(rng, shape, depthwise=False):
    cout, _, kh, kw = shape
    fan_out = kh * kw * (1 if depthwise else cout)
    return rng.normal(0.0, math.sqrt(2.0 / fan_out), size=shape)


def _dense_init(rng, out_f, in_f):
    bound = 1.0 / math.sqrt(in_f)
    return rng.uniform(-bound, bound, size=(out_f, in_f))


class ConvBN(Module):
    """Convolution (regular or depthwise) followed by batch norm and optional SiLU."""

    def __init__(self, rng, cin, cout, kernel, stride=1, depthwise=False, act=True):
        super().__init__()
        self.stride, self.depthwise, self.act = stride, depthwise, act
        shape = (cout, 1, kernel, kernel) if depthwise else (cout, cin, kernel, kernel)
        self.weight = self.add_param("conv.weight", _conv_init(rng, shape, depthwise))
        self.gamma = self.add_param("bn.gamma", np.ones(cout))
        self.beta = self.add_param("bn.beta", np.zeros(cout))
        self._buffers["bn.running_mean"] = np.zeros(cout, dtype=T.get_dtype())
        self._buffers["bn.running_var"] = np.ones(cout, dtype=T.get_dtype())

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        if self.depthwise:
            y = T.depthwise_conv2d(x, self.weight, self.stride)
        else:
            y = T.conv2d(x, self.weight, self.stride)
        y = T.batch_norm(
            y, self.gamma, self.beta,
            self._buffers["bn.running_mean"], self._buffers["bn.running_var"],
            training=ctx.training, momentum=ctx.bn_momentum,
        )
        return T.silu(y) if self.act else y


class SqueezeExcite(Module):
    def __init__(self, rng, channels, squeeze):
        super().__init__()
        self.reduce_w = self.add_param("reduce.weight", _dense_init(rng, squeeze, channels))
        self.reduce_b = self.add_param("reduce.bias", np.zeros(squeeze))
        self.expand_w = self.add_param("expand.weight", _dense_init(rng, channels, squeeze))
        self.expand_b = self.add_param("expand.bias", np.zeros(channels))

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        n, c = x.shape[:2]
        s = T.global_avg_pool(x)
        s = T.silu(T.fully_connected(s, self.reduce_w, self.reduce_b))
        s = T.sigmoid(T.fully_connected(s, self.expand_w, self.expand_b))
        return T.mul(x, T.reshape(s, (n, c, 1, 1)))


class Block(Module):
    """One MBConv or Fused-MBConv layer, with residual + stochastic depth when shapes allow."""

    def __init__(self, rng, op_type, cin, cout, expansion, kernel, stride, se_ratio):
        super().__init__()
        if expansion not in (1, 4, 6):
            raise ValueError(f"expansion must be 1, 4 or 6, got {expansion}")
        if kernel not in (3, 5):
            raise ValueError(f"kernel must be 3 or 5, got {kernel}")
        self.op_type = op_type
        self.has_skip = stride == 1 and cin == cout
        mid = cin * expansion
        self.layers: list[Module] = []

        def push(name, module):
            self.layers.append(self.add_child(name, module))

        if op_type == "MBConv":
            if expansion != 1:
                push("expand", ConvBN(rng, cin, mid, 1))
            push("depthwise", ConvBN(rng, mid, mid, kernel, stride, depthwise=True))
            if se_ratio > 0:
                push("se", SqueezeExcite(rng, mid, se_units(cin, se_ratio)))
            push("project", ConvBN(rng, mid, cout, 1, act=False))
        elif op_type == "FusedMBConv":
            if expansion != 1:
                push("fused", ConvBN(rng, cin, mid, kernel, stride))
                if se_ratio > 0:
                    push("se", SqueezeExcite(rng, mid, se_units(cin, se_ratio)))
                push("project", ConvBN(rng, mid, cout, 1, act=False))
            else:
                push("fused", ConvBN(rng, cin, cout, kernel, stride))
                if se_ratio > 0:
                    push("se", SqueezeExcite(rng, cout, se_units(cin, se_ratio)))
        else:
            raise ValueError(f"unknown block op {op_type!r}")

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        y = x
        for layer in self.layers:
            y = layer(y, ctx)
        if self.has_skip:
            y = T.stochastic_depth(y, x, ctx.survival_prob, ctx.training, ctx.rng)
        return y


class Network(Module):
    """Stem, stages of blocks, and the conv1x1 / pool / dropout / FC head."""

    def __init__(self, arch: ArchSpec, rng: np.random.Generator):
        super().__init__()
        arch.validate()
        self.arch = arch
        self.stem = self.add_child(
            "stem", ConvBN(rng, arch.in_channels, arch.stem.out_channels, arch.stem.kernel, arch.stem.stride)
        )
        self.blocks: list[Block] = []
        for s, layer, cin, spec in arch.layers():
            block = Block(rng, spec.op_type, cin, spec.out_channels, spec.expansion_ratio, spec.kernel,
                          spec.stride, spec.se_ratio)
            self.blocks.append(self.add_child(f"stages.{s}.{layer}", block))
        last = arch.stages[-1].out_channels
        self.head = self.add_child("head", ConvBN(rng, last, arch.head.out_channels, 1))
        self.fc_w = self.add_param("classifier.weight", _dense_init(rng, arch.num_classes, arch.head.out_channels))
        self.fc_b = self.add_param("classifier.bias", np.zeros(arch.num_classes))

    def __call__(self, x, ctx: Optional[ForwardContext] = None) -> Tensor:
        ctx = ctx or ForwardContext()
        x = x if isinstance(x, Tensor) else Tensor(x)
        y = self.stem(x, ctx)
        for block in self.blocks:
            y = block(y, ctx)
        y = self.head(y, ctx)
        y = T.global_avg_pool(y)
        y = T.reshape(y, y.shape[:2])
        y = T.dropout(y, ctx.dropout_rate, ctx.training, ctx.rng)
        return T.fully_connected(y, self.fc_w, self.fc_b)

    forward = __call__

    def reset_classifier(self, num_classes: int, rng) -> None:
        """Fresh FC layer for a new label set; everything else is kept."""
        if not isinstance(rng, np.random.Generator):
            rng = T.make_rng(int(rng))
        self.arch = with_classes(self.arch, num_classes)
        self.fc_w = self.add_param("classifier.weight", _dense_init(rng, num_classes, self.arch.head.out_channels))
        self.fc_b = self.add_param("classifier.bias", np.zeros(num_classes))

    def state(self) -> dict[str, np.ndarray]:
        """Parameters and BN statistics keyed by name (arrays are live references)."""
        out = {f"param/{k}": p.data for k, p in self.named_parameters()}
        out.update({f"buffer/{k}": b for k, b in self.named_buffers()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        for key, value in state.items():
            kind, _, name = key.partition("/")
            target = params[name].data if kind == "param" else buffers[name]
            if target.shape != value.shape:
                raise ValueError(f"{key}: shape {value.shape} != {target.shape}")
            target[...] = value

    @contextmanager
    def swapped_params(self, values: dict[str, np.ndarray]):
        """Temporarily evaluate with other parameter values (e.g. EMA shadows)."""
        params = dict(self.named_parameters())
        saved = {k: params[k].data for k in values}
        try:
            for k, v in values.items():
                params[k].data = v
            yield self
        finally:
            for k, v in saved.items():
                params[k].data = v


def instantiate(arch: ArchSpec, rng) -> Network:
    """Build a network with initialised weights; ``rng`` may be a seed."""
    if not isinstance(rng, np.random.Generator):
        rng = T.make_rng(int(rng))
    return Network(arch, rng)


def is_decayed(name: str) -> bool:
    """Weight decay applies to conv and dense kernels, not to BN or biases."""
    return name.endswith("weight")
