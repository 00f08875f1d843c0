"""Dense NCHW tensors with reverse-mode automatic differentiation.

Only the operator set needed by MBConv / Fused-MBConv networks and their
training is provided. Every op returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to parent gradients;
:func:`backward` replays those closures in reverse execution order.

Arithmetic runs in float32 unless :func:`precision` (or
:func:`set_precision`) switches the default to float64, which the gradient
checks use.
"""

from __future__ import annotations

import itertools
import zlib
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "set_precision",
    "get_dtype",
    "precision",
    "make_rng",
    "derive_rng",
    "add",
    "mul",
    "sum",
    "mean",
    "reshape",
    "conv2d",
    "depthwise_conv2d",
    "batch_norm",
    "silu",
    "sigmoid",
    "global_avg_pool",
    "fully_connected",
    "dropout",
    "stochastic_depth",
    "softmax_cross_entropy",
    "backward",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf reached an op that refuses to propagate it."""


_DTYPES = {"float32": np.float32, "float64": np.float64}
_dtype = np.float32
_counter = itertools.count()


def set_precision(name: str) -> None:
    global _dtype
    if name not in _DTYPES:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {name!r}")
    _dtype = _DTYPES[name]


def get_dtype():
    return _dtype


@contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the default compute precision."""
    previous = _dtype
    set_precision(name)
    try:
        yield
    finally:
        globals()["_dtype"] = previous


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator for ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def derive_rng(seed: int, *stream) -> np.random.Generator:
    """Independent Philox stream identified by ``(seed, *stream)``.

    Stream parts are non-negative ints or strings (hashed with CRC32). Streams are
    pure functions of their key, so a training step or a sample index always sees
    the same random numbers regardless of what ran before.
    """
    key = [zlib.crc32(s.encode()) if isinstance(s, str) else int(s) for s in (seed, *stream)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=_dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._seq = next(_counter)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._seq = next(_counter)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = grad_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{where}: input contains NaN or Inf")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise and shape ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting (used for SE gating)."""
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def grad_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), grad_fn)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _result(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(x.data * s, (x,), lambda g: (g * s * (1.0 + x.data * (1.0 - s)),))


# ----------------------------------------------------------------------------
# convolutions


def _padding(kh: int, kw: int, padding: str) -> tuple:
    if padding == "same":
        # total k-1, extra pixel bottom/right; output is ceil(h / stride)
        return ((kh - 1) // 2, kh - 1 - (kh - 1) // 2), ((kw - 1) // 2, kw - 1 - (kw - 1) // 2)
    if padding == "valid":
        return (0, 0), (0, 0)
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def _check_conv_args(x: Tensor, kh: int, kw: int, stride: int, where: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{where}: expected NCHW input, got shape {x.shape}")
    if kh not in (1, 3, 5) or kw not in (1, 3, 5):
        raise ValueError(f"{where}: kernel must be 1, 3 or 5, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ValueError(f"{where}: stride must be 1 or 2, got {stride}")
    _check_finite(x.data, where)


def _out_size(size: int, k: int, pad: tuple, stride: int) -> int:
    out = (size + pad[0] + pad[1] - k) // stride + 1
    if out < 1:
        raise ShapeError(f"input size {size} too small for kernel {k}")
    return out


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation of ``x`` (n, cin, h, w) with ``weight`` (cout, cin, kh, kw)."""
    cout, wcin, kh, kw = weight.shape
    _check_conv_args(x, kh, kw, stride, "conv2d")
    n, cin, h, w = x.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: weight expects {wcin} input channels, input has {cin}")
    X, W = x.data, weight.data
    W2 = W.reshape(cout, cin * kh * kw)

    if kh == kw == 1 and stride == 1:
        x2 = X.reshape(n, cin, h * w)
        out = np.matmul(W2, x2).reshape(n, cout, h, w)

        def grad_fn(g):
            g2 = g.reshape(n, cout, h * w)
            gx = np.matmul(W2.T, g2).reshape(X.shape) if x.requires_grad else None
            gw = np.tensordot(g2, x2, axes=([0, 2], [0, 2])).reshape(W.shape) if weight.requires_grad else None
            return gx, gw

        return _result(out, (x, weight), grad_fn)

    ph, pw = _padding(kh, kw, padding)
    oh, ow = _out_size(h, kh, ph, stride), _out_size(w, kw, pw, stride)
    xp = np.pad(X, ((0, 0), (0, 0), ph, pw)) if padding == "same" else X
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(cin * kh * kw, n * oh * ow)
    out = np.ascontiguousarray((W2 @ cols).reshape(cout, n, oh, ow).transpose(1, 0, 2, 3))

    def grad_fn(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, n * oh * ow)
        gw = (g2 @ cols.T).reshape(W.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (W2.T @ g2).reshape(cin, kh, kw, n, oh, ow)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += (
                        gcols[:, i, j].transpose(1, 0, 2, 3)
                    )
            gx = gxp[:, :, ph[0]:ph[0] + h, pw[0]:pw[0] + w]
        return gx, gw

    return _result(out, (x, weight), grad_fn)


def depthwise_conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Per-channel filtering: ``weight`` has shape (c, 1, kh, kw)."""
    c, one, kh, kw = weight.shape
    _check_conv_args(x, kh, kw, stride, "depthwise_conv2d")
    n, cin, h, w = x.shape
    if one != 1 or c != cin:
        raise ShapeError(f"depthwise_conv2d: weight shape {weight.shape} does not match {cin} channels")
    X, W = x.data, weight.data
    ph, pw = _padding(kh, kw, padding)
    oh, ow = _out_size(h, kh, ph, stride), _out_size(w, kw, pw, stride)
    xp = np.pad(X, ((0, 0), (0, 0), ph, pw)) if padding == "same" else X

    def tap(arr, i, j):
        return arr[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride]

    out = np.zeros((n, c, oh, ow), dtype=X.dtype)
    for i in range(kh):
        for j in range(kw):
            out += tap(xp, i, j) * W[:, 0, i, j][:, None, None]

    def grad_fn(g):
        gw = np.zeros_like(W) if weight.requires_grad else None
        gxp = np.zeros(xp.shape, dtype=g.dtype) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                if gw is not None:
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, tap(xp, i, j))
                if gxp is not None:
                    tap(gxp, i, j)[...] += g * W[:, 0, i, j][:, None, None]
        gx = gxp[:, :, ph[0]:ph[0] + h, pw[0]:pw[0] + w] if gxp is not None else None
        return gx, gw

    return _result(out, (x, weight), grad_fn)


# ----------------------------------------------------------------------------
# normalisation, pooling, dense


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.99,
    eps: float = 1e-3,
) -> Tensor:
    """Per-channel batch normalisation.

    In training mode the batch statistics normalise the input and the running
    statistics are updated in place as ``momentum * running + (1 - momentum) * batch``.
    Eval mode uses the running statistics unchanged.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm: expected NCHW input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({c},)")
    X = x.data
    axes = (0, 2, 3)
    if training:
        mu = X.mean(axis=axes)
        var = X.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu = running_mean.astype(X.dtype, copy=False)
        var = running_var.astype(X.dtype, copy=False)
    inv = (1.0 / np.sqrt(var + eps)).astype(X.dtype, copy=False)
    xhat = (X - mu[:, None, None]) * inv[:, None, None]
    out = xhat * gamma.data[:, None, None] + beta.data[:, None, None]
    m = X.size // c

    def grad_fn(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[:, None, None]
            if training:
                gx = (inv[:, None, None] / m) * (
                    m * gxhat
                    - gxhat.sum(axis=axes)[:, None, None]
                    - xhat * (gxhat * xhat).sum(axis=axes)[:, None, None]
                )
            else:
                gx = gxhat * inv[:, None, None]
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), grad_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return _result(out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))


def fully_connected(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x`` of shape (n, c) (or (n, c, 1, 1)) times ``weight.T`` plus ``bias``."""
    n = x.shape[0]
    X2 = x.data.reshape(n, -1)
    out_f, in_f = weight.shape
    if X2.shape[1] != in_f:
        raise ShapeError(f"fully_connected: weight expects {in_f} features, input has {X2.shape[1]}")
    if bias is not None and bias.shape != (out_f,):
        raise ShapeError(f"fully_connected: bias must have shape ({out_f},)")
    _check_finite(X2, "fully_connected")
    W = weight.data
    out = X2 @ W.T
    if bias is not None:
        out = out + bias.data

    def grad_fn(g):
        gx = (g @ W).reshape(x.shape) if x.requires_grad else None
        gw = g.T @ X2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if bias.requires_grad else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, grad_fn)


# ----------------------------------------------------------------------------
# stochastic regularisers


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Unit-level dropout with inverted scaling; identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def stochastic_depth(
    block_output: Tensor,
    block_input: Tensor,
    survival_prob: float,
    training: bool,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Residual sum where each example's branch survives with ``survival_prob``.

    Dropped examples pass ``block_input`` through; kept ones receive
    ``block_input + block_output / survival_prob``.
    """
    if block_output.shape != block_input.shape:
        raise ShapeError(f"stochastic_depth: shapes {block_output.shape} and {block_input.shape} differ")
    if not 0.0 < survival_prob <= 1.0:
        raise ValueError(f"survival_prob must be in (0, 1], got {survival_prob}")
    if not training or survival_prob == 1.0:
        return add(block_input, block_output)
    if rng is None:
        raise ValueError("stochastic_depth in training mode needs an rng")
    n = block_output.shape[0]
    keep = rng.random(n) < survival_prob
    scale = (keep / survival_prob).astype(block_output.dtype).reshape((n,) + (1,) * (block_output.ndim - 1))
    out = block_input.data + block_output.data * scale
    return _result(out, (block_output, block_input), lambda g: (g * scale, g))


# ----------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of ``logits`` (n, k) against integer labels or soft label rows."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected (n, k) logits, got {logits.shape}")
    n, k = logits.shape
    targets = np.asarray(targets)
    if targets.ndim == 1:
        onehot = np.zeros((n, k), dtype=logits.dtype)
        onehot[np.arange(n), targets.astype(np.int64)] = 1.0
        targets = onehot
    if targets.shape != (n, k):
        raise ShapeError(f"softmax_cross_entropy: targets shape {targets.shape} != {(n, k)}")
    _check_finite(logits.data, "softmax_cross_entropy")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    t = targets.astype(logits.dtype, copy=False)
    loss = np.asarray(-(t * logp).sum() / n, dtype=logits.dtype)
    probs = np.exp(logp)
    return _result(loss, (logits,), lambda g: (g * (probs * t.sum(axis=1, keepdims=True) - t) / n,))


# ----------------------------------------------------------------------------
# backward pass


class Tape:
    """The recorded ops that lead to a loss, in execution order."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen = {id(loss)}
        stack, nodes = [loss], []
        while stack:
            node = stack.pop()
            nodes.append(node)
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    seen.add(id(parent))
                    stack.append(parent)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate ``.grad`` on every leaf tensor that requires it.

    Gradients accumulate into existing ``.grad`` arrays, so callers reset them
    between steps.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = tape or Tape.from_loss(loss)
    pending = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
