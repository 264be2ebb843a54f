"""Differentiable primitives recorded onto a :class:`~bpfpn_lab.graph.Graph`.

Every function takes the graph and node ids, computes the forward value,
and records a node whose ``vjp`` maps the output gradient to input gradients
(and to a parameter gradient for nodes that consume a parameter).

FLOP accounting stored in ``node.meta["flops"]``:

=================  =====================================
conv2d             2 * N*O*H*W*C*kh*kw (multiply-accumulates x 2)
bias_add, relu     1 per output element
add                1 per output element
avgpool2, maxpool2 1 per input element
mean_scalar        1 per input element
dot_const          2 per input element
bce_with_logits    0 (training only, not part of inference)
data movement      0 (space/depth shuffles, upsample, concat, stop_gradient)
=================  =====================================
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractError, ShapeError
from .graph import Graph, Parameter
from .tensor import Rng, randn


@dataclass
class ConvWeights:
    weight: Parameter  # (out_c, in_c, k, k)
    bias: Parameter  # (1, out_c, 1, 1)

    @classmethod
    def init(cls, name: str, out_c: int, in_c: int, k: int, rng: Rng) -> "ConvWeights":
        """He-normal kernel, std ``sqrt(2 / fan_in)``, zero bias."""
        if k not in (1, 3):
            raise ShapeError(f"kernel size must be 1 or 3, got {k}")
        std = np.sqrt(2.0 / (in_c * k * k))
        return cls(
            Parameter(f"{name}.weight", randn((out_c, in_c, k, k), rng, std)),
            Parameter(f"{name}.bias", np.zeros((1, out_c, 1, 1))),
        )

    @property
    def params(self) -> list[Parameter]:
        return [self.weight, self.bias]

    @property
    def out_c(self) -> int:
        return self.weight.value.shape[0]

    @property
    def in_c(self) -> int:
        return self.weight.value.shape[1]

    @property
    def k(self) -> int:
        return self.weight.value.shape[2]


def _shape(g: Graph, x: int):
    return g.value(x).shape


def _even_spatial(g, x, op):
    _, _, h, w = _shape(g, x)
    if h % 2 or w % 2:
        raise ShapeError(f"{op} needs even spatial dims, got {h}x{w}")


# -- convolution -----------------------------------------------------------


def conv2d_nobias(g: Graph, x: int, weight: Parameter) -> int:
    xv = g.value(x)
    w = weight.value
    k = w.shape[2]
    if w.shape[1] != xv.shape[1]:
        raise ShapeError(f"conv2d expects {w.shape[1]} input channels, got {xv.shape[1]}")
    pad = (k - 1) // 2
    y = kernels.conv2d_forward(xv, w, pad)

    def vjp(gy, needs):
        gx = kernels.conv2d_backward_input(gy, w, pad) if needs[0] else None
        gw = kernels.conv2d_backward_weight(xv, gy, k, k, pad)
        return (gx,), gw

    n, o, h, wd = y.shape
    return g.record("conv2d", (x,), y, vjp, param=weight, flops=2 * n * o * h * wd * w[0].size)


def bias_add(g: Graph, x: int, bias: Parameter) -> int:
    xv = g.value(x)
    if bias.value.shape != (1, xv.shape[1], 1, 1):
        raise ShapeError(f"bias shape {bias.value.shape} does not match {xv.shape[1]} channels")

    def vjp(gy, needs):
        return (gy,), gy.sum(axis=(0, 2, 3), keepdims=True)

    return g.record("bias_add", (x,), xv + bias.value, vjp, param=bias, flops=xv.size)


def conv2d(g: Graph, x: int, w: ConvWeights) -> int:
    """Cross-correlation with 'same' zero padding and stride 1, plus bias."""
    return bias_add(g, conv2d_nobias(g, x, w.weight), w.bias)


# -- shuffles and resampling -----------------------------------------------


def _s2d(x):
    n, c, h, w = x.shape
    y = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(y.reshape(n, 4 * c, h // 2, w // 2))


def _d2s(x):
    n, c4, h, w = x.shape
    c = c4 // 4
    y = x.reshape(n, c, 2, 2, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(y.reshape(n, c, 2 * h, 2 * w))


def space_to_depth2(g: Graph, x: int) -> int:
    """(n, c, h, w) -> (n, 4c, h/2, w/2); channel ``4*c + 2*dy + dx``."""
    _even_spatial(g, x, "space_to_depth2")
    return g.record("space_to_depth2", (x,), _s2d(g.value(x)), lambda gy, needs: ((_d2s(gy),), None))


def depth_to_space2(g: Graph, x: int) -> int:
    if _shape(g, x)[1] % 4:
        raise ShapeError(f"depth_to_space2 needs channels divisible by 4, got {_shape(g, x)[1]}")
    return g.record("depth_to_space2", (x,), _d2s(g.value(x)), lambda gy, needs: ((_s2d(gy),), None))


def upsample_nearest2(g: Graph, x: int) -> int:
    y = g.value(x).repeat(2, axis=2).repeat(2, axis=3)

    def vjp(gy, needs):
        n, c, h2, w2 = gy.shape
        return (gy.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),), None

    return g.record("upsample_nearest2", (x,), y, vjp)


def _windows(x):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)


def _unwindow(win):
    n, c, h, w, _ = win.shape
    return np.ascontiguousarray(
        win.reshape(n, c, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h, 2 * w)
    )


def maxpool2(g: Graph, x: int) -> int:
    """2x2/2 max pooling; ties go to the first element in row-major window order."""
    _even_spatial(g, x, "maxpool2")
    xv = g.value(x)
    win = _windows(xv)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def vjp(gy, needs):
        gwin = np.zeros(win.shape)
        np.put_along_axis(gwin, arg[..., None], gy[..., None], axis=-1)
        return (_unwindow(gwin),), None

    return g.record("maxpool2", (x,), np.ascontiguousarray(y), vjp, flops=xv.size, argmax=arg)


def avgpool2(g: Graph, x: int) -> int:
    _even_spatial(g, x, "avgpool2")
    xv = g.value(x)
    n, c, h, w = xv.shape
    y = xv.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def vjp(gy, needs):
        return (np.ascontiguousarray(0.25 * gy.repeat(2, axis=2).repeat(2, axis=3)),), None

    return g.record("avgpool2", (x,), y, vjp, flops=xv.size)


# -- pointwise and structural ---------------------------------------------


def relu(g: Graph, x: int) -> int:
    xv = g.value(x)
    mask = xv > 0

    def vjp(gy, needs):
        return (gy * mask,), None

    return g.record("relu", (x,), np.where(mask, xv, 0.0), vjp, flops=xv.size, mask=mask)


def add(g: Graph, x: int, y: int) -> int:
    if _shape(g, x) != _shape(g, y):
        raise ShapeError(f"add: shapes {_shape(g, x)} and {_shape(g, y)} differ")
    return g.record(
        "add", (x, y), g.value(x) + g.value(y), lambda gy, needs: ((gy, gy), None), flops=g.value(x).size
    )


def concat_channels(g: Graph, xs) -> int:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat_channels needs at least one input")
    shapes = [_shape(g, x) for x in xs]
    n, _, h, w = shapes[0]
    if any((s[0], s[2], s[3]) != (n, h, w) for s in shapes):
        raise ShapeError(f"concat_channels: incompatible shapes {shapes}")
    bounds = np.cumsum([0] + [s[1] for s in shapes])

    def vjp(gy, needs):
        return tuple(np.ascontiguousarray(gy[:, a:b]) for a, b in zip(bounds[:-1], bounds[1:])), None

    return g.record("concat_channels", xs, np.concatenate([g.value(x) for x in xs], axis=1), vjp)


def mean_scalar(g: Graph, x: int) -> int:
    xv = g.value(x)

    def vjp(gy, needs):
        return (np.full(xv.shape, gy[0, 0, 0, 0] / xv.size),), None

    return g.record("mean_scalar", (x,), np.full((1, 1, 1, 1), xv.mean()), vjp, flops=xv.size)


def dot_const(g: Graph, x: int, weights) -> int:
    """Scalar ``sum(x * weights)`` for a constant tensor ``weights``."""
    xv = g.value(x)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != xv.shape:
        raise ShapeError(f"dot_const: weights {weights.shape} vs input {xv.shape}")

    def vjp(gy, needs):
        return (gy[0, 0, 0, 0] * weights,), None

    return g.record(
        "dot_const", (x,), np.full((1, 1, 1, 1), np.sum(xv * weights)), vjp, flops=2 * xv.size
    )


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def bce_with_logits(g: Graph, logits: int, target) -> int:
    """Mean binary cross-entropy on logits, in the overflow-free form."""
    z = g.value(logits)
    t = np.asarray(target, dtype=np.float64)
    if t.shape != z.shape:
        raise ShapeError(f"bce_with_logits: target {t.shape} vs logits {z.shape}")
    if not np.isin(t, (0.0, 1.0)).all():
        raise ContractError("bce_with_logits: target values must be 0 or 1")
    per = np.maximum(z, 0.0) - t * z + np.log1p(np.exp(-np.abs(z)))

    def vjp(gy, needs):
        return ((sigmoid(z) - t) * (gy[0, 0, 0, 0] / z.size),), None

    return g.record("bce_with_logits", (logits,), np.full((1, 1, 1, 1), per.mean()), vjp, flops=0)
