"""Differentiable layer primitives.

Each layer is a fused operation with a hand-written backward rule, recorded on
the active tape like any elementwise op. Layout is NCHW throughout and
convolutions are cross-correlations (no kernel flip) with explicit zero
padding.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    DegenerateBatch,
    EmptyOutput,
    InvalidRate,
    LabelOutOfRange,
    NonFiniteResult,
    ShapeMismatch,
)
from .tensor import Tensor, make_result

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.99


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _unpad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    h, w = x.shape[2], x.shape[3]
    return x[:, :, ph : h - ph, pw : w - pw]


def _geometry(x: Tensor, kh, kw, stride, padding):
    if x.ndim != 4:
        raise ShapeMismatch(f"expected NCHW input, got shape {x.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise ShapeMismatch("stride must be positive and padding non-negative")
    ho = conv_output_size(x.shape[2], kh, sh, ph)
    wo = conv_output_size(x.shape[3], kw, sw, pw)
    if ho < 1 or wo < 1:
        raise EmptyOutput(
            f"{kh}x{kw} kernel does not fit {x.shape[2]}x{x.shape[3]} input with padding {(ph, pw)}"
        )
    return sh, sw, ph, pw, ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """Standard 2-D convolution. ``weight`` is [Cout, Cin, Kh, Kw]."""
    if weight.ndim != 4:
        raise ShapeMismatch(f"conv2d weight must be 4-D, got {weight.shape}")
    cout, cin, kh, kw = weight.shape
    if x.ndim == 4 and x.shape[1] != cin:
        raise ShapeMismatch(f"conv2d: input has {x.shape[1]} channels, weight expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeMismatch(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    sh, sw, ph, pw, ho, wo = _geometry(x, kh, kw, stride, padding)
    w = weight.data
    n = x.shape[0]

    if kh == kw == 1 and sh == sw == 1 and ph == pw == 0:
        # pointwise fast path: one batched matmul
        x3 = x.data.reshape(n, cin, -1)
        w2 = w.reshape(cout, cin)
        out = np.matmul(w2, x3).reshape(n, cout, ho, wo)

        def grad_fn(g):
            g3 = g.reshape(n, cout, -1)
            dx = np.matmul(w2.T, g3).reshape(x.shape) if x.requires_grad else None
            dw = np.tensordot(g3, x3, axes=([0, 2], [0, 2])).reshape(w.shape) if weight.requires_grad else None
            return dx, dw, (g.sum(axis=(0, 2, 3)) if bias is not None else None)

    else:
        xp = _pad(x.data, ph, pw)
        cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
        out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

        def grad_fn(g):
            dx = dw = None
            if weight.requires_grad:
                dw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            if x.requires_grad:
                dcols = np.tensordot(g, w, axes=([1], [0]))  # [N, Ho, Wo, Cin, Kh, Kw]
                dxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += (
                            dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                        )
                dx = _unpad(dxp, ph, pw)
            return dx, dw, (g.sum(axis=(0, 2, 3)) if bias is not None else None)

    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
        inputs = (x, weight, bias)
    else:
        inputs = (x, weight)
        inner = grad_fn
        grad_fn = lambda g: inner(g)[:2]  # noqa: E731
    return make_result(np.ascontiguousarray(out), inputs, grad_fn)


def depthwise_conv2d(x: Tensor, weight: Tensor, stride=1, padding=0) -> Tensor:
    """Per-channel spatial convolution. ``weight`` is [C, 1, Kh, Kw]."""
    if weight.ndim != 4 or weight.shape[1] != 1:
        raise ShapeMismatch(f"depthwise weight must be [C, 1, Kh, Kw], got {weight.shape}")
    c, _, kh, kw = weight.shape
    if x.ndim == 4 and x.shape[1] != c:
        raise ShapeMismatch(f"depthwise: input has {x.shape[1]} channels, weight has {c} filters")
    sh, sw, ph, pw, ho, wo = _geometry(x, kh, kw, stride, padding)
    xp = _pad(x.data, ph, pw)
    w = weight.data[:, 0]

    def window(arr, i, j):
        return arr[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw]

    out = np.zeros((x.shape[0], c, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            out += window(xp, i, j) * w[:, i, j].reshape(1, c, 1, 1)

    def grad_fn(g):
        dx = dw = None
        if weight.requires_grad:
            dw = np.empty_like(weight.data)
            for i in range(kh):
                for j in range(kw):
                    dw[:, 0, i, j] = np.einsum("ncij,ncij->c", g, window(xp, i, j))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    window(dxp, i, j)[...] += g * w[:, i, j].reshape(1, c, 1, 1)
            dx = _unpad(dxp, ph, pw)
        return dx, dw

    return make_result(out, (x, weight), grad_fn)


def depthwise_separable(x: Tensor, depthwise: Tensor, pointwise: Tensor, stride=1, padding=None) -> Tensor:
    """Depthwise stage followed by a 1x1 pointwise stage.

    ``padding=None`` keeps "same" geometry for odd kernels.
    """
    if padding is None:
        padding = (depthwise.shape[2] // 2, depthwise.shape[3] // 2)
    return conv2d(depthwise_conv2d(x, depthwise, stride, padding), pointwise)


def _channel_axes(x: Tensor):
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise ShapeMismatch(f"batch norm expects [N,C] or [N,C,H,W], got {x.shape}")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPSILON,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics normalize the input and the running
    statistics are updated in place (``running = momentum * running +
    (1 - momentum) * batch``). In eval mode the running statistics are used
    and left untouched.
    """
    axes, bshape = _channel_axes(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"batch norm affine params must have shape ({c},)")
    m = x.size // c
    xd = x.data
    if training:
        if m < 2:
            raise DegenerateBatch(f"batch norm in training mode needs >= 2 values per channel, got {m}")
        with np.errstate(over="ignore"):
            mu = xd.mean(axis=axes)
            var = xd.var(axis=axes)
        # an overflowing variance would otherwise normalize silently to zero
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(var))):
            raise NonFiniteResult("batch norm statistics overflowed")
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var * (m / (m - 1))
    else:
        mu = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def grad_fn(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            dx = (inv.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            dx = dxhat * inv.reshape(bshape)
        return dx, dgamma, dbeta

    return make_result(out, (x, gamma, beta), grad_fn)


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` at train time."""
    if not 0 <= rate < 1:
        raise InvalidRate(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return make_result(x.data * keep, (x,), lambda g: (g * keep,))


def global_average_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeMismatch(f"expected NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    area = h * w

    def grad_fn(g):
        return (np.broadcast_to((g / area).reshape(n, c, 1, 1), x.shape),)

    return make_result(x.data.mean(axis=(2, 3)), (x,), grad_fn)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` with ``weight`` as [F, U]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeMismatch(f"dense: cannot apply {weight.shape} weights to input {x.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeMismatch(f"dense bias must have shape ({weight.shape[1]},), got {bias.shape}")
    out = x.data @ weight.data + bias.data

    def grad_fn(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return make_result(out, (x, weight, bias), grad_fn)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, Tensor]:
    """Mean negative log-likelihood of ``labels`` under softmax(logits).

    Returns the scalar loss and the (non-differentiable) probabilities.
    """
    if logits.ndim != 2:
        raise ShapeMismatch(f"logits must be [N, K], got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeMismatch(f"{labels.shape[0]} labels for {n} rows of logits")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((lse - z[rows, labels]).mean(), dtype=logits.dtype)
    probs = np.exp(z - lse[:, None])

    def grad_fn(g):
        d = probs.copy()
        d[rows, labels] -= 1
        return (d * (g / n),)

    return make_result(loss, (logits,), grad_fn), Tensor._wrap(probs)


# parameter bundles


@dataclass
class Conv2dParams:
    weight: Tensor
    bias: Optional[Tensor] = None
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    @property
    def parameter_count(self) -> int:
        return self.weight.size + (self.bias.size if self.bias is not None else 0)


@dataclass
class DepthwiseSeparableParams:
    depthwise: Tensor
    pointwise: Tensor
    stride: tuple = (1, 1)
    padding: Optional[tuple] = None

    def __post_init__(self):
        c = self.depthwise.shape[0]
        if self.depthwise.shape[1] != 1 or self.pointwise.shape[1:] != (c, 1, 1):
            raise ShapeMismatch(
                f"depthwise {self.depthwise.shape} and pointwise {self.pointwise.shape} do not compose"
            )

    def __call__(self, x: Tensor) -> Tensor:
        return depthwise_separable(x, self.depthwise, self.pointwise, self.stride, self.padding)

    @property
    def parameter_count(self) -> int:
        return self.depthwise.size + self.pointwise.size


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = BN_EPSILON
    momentum: float = BN_MOMENTUM

    @classmethod
    def identity(cls, channels: int, requires_grad: bool = True) -> "BatchNormParams":
        return cls(
            Tensor(np.ones(channels), requires_grad=requires_grad),
            Tensor(np.zeros(channels), requires_grad=requires_grad),
            np.zeros(channels, dtype=np.float32),
            np.ones(channels, dtype=np.float32),
        )

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, training, self.momentum, self.epsilon
        )


@dataclass
class DropoutParams:
    rate: float = 0.5
    training: bool = field(default=True)

    def __post_init__(self):
        if not 0 <= self.rate < 1:
            raise InvalidRate(f"dropout rate must lie in [0, 1), got {self.rate}")

    def __call__(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        return dropout(x, self.rate, self.training, rng)


def parameter_count_standard_conv(kernel: int, cin: int, cout: int) -> int:
    return kernel * kernel * cin * cout


def parameter_count_separable(kernel: int, cin: int, cout: int) -> int:
    return kernel * kernel * cin + cin * cout


__all__: Sequence[str] = [
    "conv2d",
    "depthwise_conv2d",
    "depthwise_separable",
    "batch_norm",
    "dropout",
    "global_average_pool",
    "dense",
    "softmax",
    "softmax_cross_entropy",
    "Conv2dParams",
    "DepthwiseSeparableParams",
    "BatchNormParams",
    "DropoutParams",
    "conv_output_size",
]
