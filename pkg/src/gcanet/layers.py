"""Convolution, normalization and residual layers on top of :mod:`gcanet.tensor`.

The conv kernels are im2col + one matmul.  A tap ``(i, j)`` of a dilated
kernel reads the (padded) input at ``(h*stride + i*r, w*stride + j*r)``.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import (
    Parameter,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    make_result,
    relu,
    reshape,
)

PADDING_MODES = ("reflect", "zero")
NORM_KINDS = ("instance", "batch", "none")


@dataclass(frozen=True)
class Conv2dSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    dilation: int = 1
    stride: int = 1
    padding_mode: str = "reflect"
    has_bias: bool = True

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be a positive odd integer, got {self.kernel_size}")
        if self.dilation < 1 or self.stride < 1:
            raise ValueError("dilation and stride must be positive")
        if self.padding_mode not in PADDING_MODES:
            raise ValueError(f"unknown padding mode {self.padding_mode!r}")

    @property
    def extent(self) -> int:
        return self.dilation * (self.kernel_size - 1) + 1

    @property
    def padding(self) -> int:
        return (self.extent - 1) // 2


# ---------------------------------------------------------------------------
# raw array kernels

def conv_output_size(size: int, kernel_size: int, dilation: int, stride: int) -> int:
    return (size - (dilation * (kernel_size - 1) + 1)) // stride + 1


def _tap_slice(tap: int, dilation: int, stride: int, n_out: int) -> slice:
    start = tap * dilation
    return slice(start, start + stride * (n_out - 1) + 1, stride)


def _im2col(xp: np.ndarray, k: int, r: int, s: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (C, k, k, N, ho, wo)."""
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        si = _tap_slice(i, r, s, ho)
        for j in range(k):
            cols[:, i, j] = xt[:, :, si, _tap_slice(j, r, s, wo)]
    return cols


def _col2im(cols: np.ndarray, padded_shape: tuple, r: int, s: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add windows back into the padded input."""
    c, k, _, n, ho, wo = cols.shape
    out = np.zeros((c, n) + tuple(padded_shape[2:]), dtype=cols.dtype)
    for i in range(k):
        si = _tap_slice(i, r, s, ho)
        for j in range(k):
            out[:, :, si, _tap_slice(j, r, s, wo)] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def _conv_forward(xp, w, r, s):
    o, c, k, _ = w.shape
    ho = conv_output_size(xp.shape[2], k, r, s)
    wo = conv_output_size(xp.shape[3], k, r, s)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d (zero-size output)", xp.shape, w.shape)
    cols = _im2col(xp, k, r, s, ho, wo)
    out = w.reshape(o, -1) @ cols.reshape(c * k * k, -1)
    out = out.reshape(o, xp.shape[0], ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols


def _conv_grad_weight(g, cols):
    o = g.shape[1]
    gm = g.transpose(1, 0, 2, 3).reshape(o, -1)
    c, k = cols.shape[:2]
    return (gm @ cols.reshape(c * k * k, -1).T).reshape(o, c, k, k)


def _conv_grad_input(g, w, padded_shape, r, s):
    o, c, k, _ = w.shape
    gm = g.transpose(1, 0, 2, 3).reshape(o, -1)
    dcols = (w.reshape(o, -1).T @ gm).reshape((c, k, k) + (g.shape[0],) + g.shape[2:])
    return _col2im(dcols, padded_shape, r, s)


def _reflect_fold(g: np.ndarray, pad: int, axis: int) -> np.ndarray:
    """Adjoint of reflect padding along one axis."""
    n = g.shape[axis] - 2 * pad
    gm = np.moveaxis(g, axis, 0)
    core = gm[pad:pad + n].copy()
    for t in range(pad):
        core[pad - t] += gm[t]
        core[n - 2 - t] += gm[pad + n + t]
    return np.moveaxis(core, 0, axis)


# ---------------------------------------------------------------------------
# differentiable ops

def pad2d(x, pad: int, mode: str = "reflect") -> Tensor:
    """Pad both spatial axes of an NCHW tensor by ``pad`` on every side."""
    x = as_tensor(x)
    if pad == 0:
        return x
    if mode not in PADDING_MODES:
        raise ValueError(f"unknown padding mode {mode!r}")
    h, w = x.shape[2:]
    if mode == "reflect" and (pad >= h or pad >= w):
        raise ShapeError(f"pad2d(reflect, pad={pad})", x.shape)
    np_mode = "reflect" if mode == "reflect" else "constant"
    data = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode=np_mode)

    def backward(g):
        if mode == "zero":
            return (g[:, :, pad:pad + h, pad:pad + w].copy(),)
        return (_reflect_fold(_reflect_fold(g, pad, 2), pad, 3),)

    return make_result(f"pad2d_{mode}", data, (x,), backward)


def conv2d(x, weight, bias=None, *, dilation: int = 1, stride: int = 1,
           padding_mode: str = "reflect", padding: Optional[int] = None) -> Tensor:
    """Dilated 2-D cross-correlation.

    ``weight`` is (out, in, k, k); ``bias`` is (1, out, 1, 1) or None.  With the
    default ``padding`` the output keeps the input size when ``stride == 1``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 4:
        raise ShapeError("conv2d", x.shape, weight.shape)
    o, c, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d needs a square odd kernel, got {weight.shape[2:]}")
    if x.shape[1] != c:
        raise ShapeError("conv2d (channel mismatch)", x.shape, weight.shape)
    if padding is None:
        padding = dilation * (k - 1) // 2
    xp = pad2d(x, padding, padding_mode)
    data, cols = _conv_forward(xp.data, weight.data, dilation, stride)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.size != o:
            raise ShapeError("conv2d (bias)", bias.shape, (1, o, 1, 1))
        data += bias.data.reshape(1, o, 1, 1)
    wd, padded_shape = weight.data, xp.shape
    inputs = (xp, weight) if bias is None else (xp, weight, bias)

    def backward(g):
        gx = _conv_grad_input(g, wd, padded_shape, dilation, stride) if xp.requires_grad else None
        gw = _conv_grad_weight(g, cols) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3)).reshape(bias.shape)

    return make_result("conv2d", data, inputs, backward)


def conv_transpose2d(x, weight, bias=None, *, stride: int = 2, dilation: int = 1) -> Tensor:
    """Transposed conv: the exact adjoint (w.r.t. its input) of a zero-padded
    strided :func:`conv2d` sharing ``weight``.

    ``weight`` is (in, out, k, k), i.e. the weight of the forward conv that maps
    ``out`` channels to ``in`` channels.  Output spatial size is ``stride`` × input.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    ci, co, k, _ = weight.shape
    if x.data.ndim != 4 or x.shape[1] != ci:
        raise ShapeError("conv_transpose2d (channel mismatch)", x.shape, weight.shape)
    pad = dilation * (k - 1) // 2
    n, _, h, w = x.shape
    ho, wo = stride * h, stride * w
    if conv_output_size(ho + 2 * pad, k, dilation, stride) != h:
        raise ShapeError(f"conv_transpose2d(stride={stride})", x.shape, weight.shape)
    padded_shape = (n, co, ho + 2 * pad, wo + 2 * pad)
    xd, wd = x.data, weight.data
    full = _conv_grad_input(xd, wd, padded_shape, dilation, stride)
    data = np.ascontiguousarray(full[:, :, pad:pad + ho, pad:pad + wo])
    if bias is not None:
        bias = as_tensor(bias)
        if bias.size != co:
            raise ShapeError("conv_transpose2d (bias)", bias.shape, (1, co, 1, 1))
        data += bias.data.reshape(1, co, 1, 1)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        gx, cols = _conv_forward(gp, wd, dilation, stride)
        gw = None
        if weight.requires_grad:
            gw = (xd.transpose(1, 0, 2, 3).reshape(ci, -1)
                  @ cols.reshape(co * k * k, -1).T).reshape(ci, co, k, k)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3)).reshape(bias.shape)

    return make_result("conv_transpose2d", data, inputs, backward)


def shared_separable_conv(x, plane, bias=None) -> Tensor:
    """Depthwise conv applying one (K, K) plane to every channel, size-preserving."""
    x, plane = as_tensor(x), as_tensor(plane)
    kk = plane.shape[-1]
    if plane.size != kk * kk or kk % 2 == 0:
        raise ShapeError("shared_separable_conv (plane)", plane.shape)
    n, c, h, w = x.shape
    flat = reshape(x, (n * c, 1, h, w))
    w4 = plane if plane.data.ndim == 4 else reshape(plane, (1, 1, kk, kk))
    out = conv2d(flat, w4, bias, padding_mode="reflect")
    return reshape(out, (n, c, h, w))


def _normalize(x: np.ndarray, axes: tuple, eps: float):
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv, mu, var


def _norm_op(name, x, gamma, beta, axes, eps, stats=None):
    x = as_tensor(x)
    if stats is None:
        xhat, inv, mu, var = _normalize(x.data, axes, eps)
    else:
        mu, var = stats
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv
    data = xhat
    inputs = [x]
    if gamma is not None:
        gamma, beta = as_tensor(gamma), as_tensor(beta)
        data = xhat * gamma.data + beta.data
        inputs += [gamma, beta]
    batch_stats = stats is None

    def backward(g):
        gxhat = g if gamma is None else g * gamma.data
        if batch_stats:
            gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
        else:
            gx = gxhat * inv
        if gamma is None:
            return (gx,)
        return gx, (g * xhat).sum(axis=(0, 2, 3), keepdims=True), g.sum(axis=(0, 2, 3), keepdims=True)

    return make_result(name, data, inputs, backward), mu, var


def instance_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalize over (h, w) per sample and channel, then apply the affine map."""
    x = as_tensor(x)
    if eps <= 0:
        raise ValueError("eps must be positive")
    if x.data.ndim != 4 or x.shape[2] * x.shape[3] <= 1:
        raise ShapeError("instance_norm (needs H*W > 1)", x.shape)
    return _norm_op("instance_norm", x, gamma, beta, (2, 3), eps)[0]


def batch_norm(x, gamma=None, beta=None, running_mean=None, running_var=None,
               training: bool = True, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Normalize over (n, h, w) per channel.

    In training mode the batch statistics are used and the running buffers (if
    given, as arrays of shape (1, C, 1, 1)) are updated in place by an
    exponential moving average; in eval mode the running buffers are used.
    """
    x = as_tensor(x)
    if eps <= 0:
        raise ValueError("eps must be positive")
    n, c, h, w = x.shape
    if not training:
        return _norm_op("batch_norm_eval", x, gamma, beta, (0, 2, 3), eps,
                        stats=(running_mean, running_var))[0]
    if n * h * w <= 1:
        raise ShapeError("batch_norm (needs N*H*W > 1)", x.shape)
    out, mu, var = _norm_op("batch_norm", x, gamma, beta, (0, 2, 3), eps)
    if running_mean is not None:
        m = n * h * w
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * m / (m - 1)
    return out


# ---------------------------------------------------------------------------
# modules

def param_rng(seed: int, name: str) -> np.random.Generator:
    """Per-parameter generator, so a weight's init depends only on (seed, name)."""
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


class Module:
    """Minimal container: parameters and child modules are found via attributes."""

    training = True

    def _children(self):
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                for v in value:
                    if isinstance(v, Module):
                        yield v

    def named_parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for value in vars(self).values():
            if isinstance(value, Parameter):
                out[value.name] = value
        for child in self._children():
            for name, p in child.named_parameters().items():
                if name in out:
                    raise ValueError(f"duplicate parameter name {name!r}")
                out[name] = p
        return out

    def parameters(self, trainable_only: bool = True) -> list[Parameter]:
        return [p for p in self.named_parameters().values() if p.trainable or not trainable_only]

    def train(self, mode: bool = True):
        self.training = mode
        for child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, spec: Conv2dSpec, name: str, seed: int = 0, init_scale: float = 1.0):
        self.spec = spec
        k = spec.kernel_size
        fan_in = spec.in_channels * k * k
        bound = init_scale * np.sqrt(6.0 / fan_in)
        rng = param_rng(seed, name + ".weight")
        self.weight = Parameter(rng.uniform(-bound, bound, (spec.out_channels, spec.in_channels, k, k)),
                                name + ".weight")
        self.bias = Parameter(np.zeros((1, spec.out_channels, 1, 1)), name + ".bias") if spec.has_bias else None

    def forward(self, x):
        s = self.spec
        return conv2d(x, self.weight, self.bias, dilation=s.dilation, stride=s.stride,
                      padding_mode=s.padding_mode)


class ConvTranspose2d(Module):
    """Stride-2 upsampling deconv (k×k, zero padding, output exactly 2× input)."""

    def __init__(self, in_channels: int, out_channels: int, name: str, kernel_size: int = 3,
                 stride: int = 2, has_bias: bool = True, seed: int = 0):
        self.stride = stride
        fan_in = in_channels * kernel_size * kernel_size
        bound = np.sqrt(6.0 / fan_in)
        rng = param_rng(seed, name + ".weight")
        self.weight = Parameter(
            rng.uniform(-bound, bound, (in_channels, out_channels, kernel_size, kernel_size)),
            name + ".weight")
        self.bias = Parameter(np.zeros((1, out_channels, 1, 1)), name + ".bias") if has_bias else None

    def forward(self, x):
        return conv_transpose2d(x, self.weight, self.bias, stride=self.stride)


class SharedSeparableConv(Module):
    """The (2r-1)×(2r-1) smoothing plane shared by all channels; delta-initialized."""

    def __init__(self, dilation: int, name: str, has_bias: bool = False):
        if dilation < 1:
            raise ValueError("dilation must be positive")
        self.dilation = dilation
        k = 2 * dilation - 1
        plane = np.zeros((1, 1, k, k))
        plane[0, 0, k // 2, k // 2] = 1.0
        self.weight = Parameter(plane, name + ".weight")
        self.bias = Parameter(np.zeros((1, 1, 1, 1)), name + ".bias") if has_bias else None

    @property
    def kernel_size(self) -> int:
        return 2 * self.dilation - 1

    def forward(self, x):
        return shared_separable_conv(x, self.weight, self.bias)


class Norm(Module):
    def __init__(self, kind: str, channels: int, name: str, eps: float = 1e-5,
                 momentum: float = 0.1):
        if kind not in NORM_KINDS:
            raise ValueError(f"unknown norm kind {kind!r}")
        self.kind = kind
        self.eps = eps
        self.momentum = momentum
        if kind == "none":
            return
        self.gamma = Parameter(np.ones((1, channels, 1, 1)), name + ".gamma")
        self.beta = Parameter(np.zeros((1, channels, 1, 1)), name + ".beta")
        if kind == "batch":
            self.running_mean = Parameter(np.zeros((1, channels, 1, 1)), name + ".running_mean",
                                          trainable=False)
            self.running_var = Parameter(np.ones((1, channels, 1, 1)), name + ".running_var",
                                         trainable=False)

    def forward(self, x):
        if self.kind == "none":
            return x
        if self.kind == "instance":
            return instance_norm(x, self.gamma, self.beta, self.eps)
        return batch_norm(x, self.gamma, self.beta, self.running_mean.data, self.running_var.data,
                          training=self.training, momentum=self.momentum, eps=self.eps)


@dataclass(frozen=True)
class ResblockSpec:
    channels: int
    dilation: int
    smoothed: bool = True
    norm_kind: str = "instance"


class SmoothedDilatedResblock(Module):
    """x + norm(conv(pre(relu(norm(conv(pre(x))))))) with dilated 3×3 convs.

    ``pre`` is the shared smoothing conv, omitted when ``spec.smoothed`` is off.
    """

    def __init__(self, spec: ResblockSpec, name: str, seed: int = 0):
        self.spec = spec
        c, r = spec.channels, spec.dilation
        conv = Conv2dSpec(c, c, 3, dilation=r)
        self.pre1 = SharedSeparableConv(r, f"{name}.pre1") if spec.smoothed else None
        self.conv1 = Conv2d(conv, f"{name}.conv1", seed)
        self.norm1 = Norm(spec.norm_kind, c, f"{name}.norm1")
        self.pre2 = SharedSeparableConv(r, f"{name}.pre2") if spec.smoothed else None
        self.conv2 = Conv2d(conv, f"{name}.conv2", seed)
        self.norm2 = Norm(spec.norm_kind, c, f"{name}.norm2")

    def forward(self, x):
        if x.shape[1] != self.spec.channels:
            raise ShapeError("resblock (channel width)", x.shape, (None, self.spec.channels))
        y = self.pre1(x) if self.pre1 is not None else x
        y = relu(self.norm1(self.conv1(y)))
        if self.pre2 is not None:
            y = self.pre2(y)
        y = self.norm2(self.conv2(y))
        return add(x, y)
