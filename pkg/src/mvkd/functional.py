"""Neural-network operations on top of the tensor core.

Each op computes its forward pass in numpy and supplies a hand-written
backward; convolution uses an im2col layout so both directions reduce to
batched matrix products.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import InvalidParameter, PatchMismatch, ShapeMismatch
from .tensor import Tensor, reduce

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def _check_temperature(temperature: float):
    if not temperature > 0:
        raise InvalidParameter(f"temperature must be > 0, got {temperature}")


def softmax(z: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    _check_temperature(temperature)
    scaled = z.data / temperature
    e = np.exp(scaled - scaled.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return ((g - (g * s).sum(axis=axis, keepdims=True)) * s / temperature,)

    return Tensor._node(s, (z,), bw, "softmax")


def log_softmax(z: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    _check_temperature(temperature)
    scaled = z.data / temperature
    shifted = scaled - scaled.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        s = np.exp(out)
        return ((g - s * g.sum(axis=axis, keepdims=True)) / temperature,)

    return Tensor._node(out, (z,), bw, "log_softmax")


# ---------------------------------------------------------------------------
# normalization and activations
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise InvalidParameter(f"eps must be > 0, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"affine params must have shape ({d},), got {gamma.shape}, {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        gx_hat = g * gamma.data
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, gg, gb

    return Tensor._node(out, (x, gamma, beta), bw, "layer_norm")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor._node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    out = x.data * s

    def bw(g):
        return (g * (s + out * (1.0 - s)),)

    return Tensor._node(out, (x,), bw, "silu")


def gelu(x: Tensor, approximate: str = "none") -> Tensor:
    """GELU; exact erf form by default, ``approximate="tanh"`` for the cubic tanh fit."""
    xd = x.data
    if approximate == "none":
        cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
        dcdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
    elif approximate == "tanh":
        inner = _SQRT_2_OVER_PI * (xd + 0.044715 * xd**3)
        th = np.tanh(inner)
        cdf = 0.5 * (1.0 + th)
        dcdf = 0.5 * (1.0 - th * th) * _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * xd * xd)
    else:
        raise InvalidParameter(f"approximate must be 'none' or 'tanh', got {approximate!r}")
    out = xd * cdf

    def bw(g):
        return (g * (cdf + xd * dcdf),)

    return Tensor._node(out.astype(x.dtype, copy=False), (x,), bw, "gelu")


_ACTIVATIONS = {"relu": relu, "silu": silu, "gelu": gelu}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise InvalidParameter(f"unknown activation {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# linear / convolution
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeMismatch(f"linear expects last dim {weight.shape[1]}, got {x.shape}")
    w = weight.data
    xd = x.data
    out = xd @ w.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        gb = g2.sum(axis=0) if bias is not None else None
        return g @ w, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._node(out, parents, bw, "linear")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation, NCHW input, weight (O, C/groups, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-d input and weight, got {x.shape}, {weight.shape}")
    B, C, H, W = x.shape
    O, Cg, kh, kw = weight.shape
    if C % groups or O % groups or Cg != C // groups:
        raise ShapeMismatch(f"channels {C}->{O} incompatible with weight {weight.shape} and groups={groups}")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ShapeMismatch(f"kernel {kh}x{kw} larger than padded input {H}x{W}")
    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(W, kw, stride, padding)
    Og = O // groups
    K = Cg * kh * kw
    xd, wd = x.data, weight.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    if groups == C and Og == 1:
        return _depthwise(x, weight, bias, stride, padding, Ho, Wo, parents)

    pointwise = kh == 1 and kw == 1 and padding == 0
    if pointwise:
        xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
        cols = xs.reshape(B, groups, Cg, Ho * Wo)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
        # (B, C, Ho, Wo, kh, kw) -> (B, groups, Cg*kh*kw, Ho*Wo)
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(B, groups, K, Ho * Wo)
    wmat = wd.reshape(groups, Og, K)
    out = np.matmul(wmat[None], cols).reshape(B, O, Ho, Wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(g):
        gm = g.reshape(B, groups, Og, Ho * Wo)
        gcols = np.matmul(np.swapaxes(wmat, 1, 2)[None], gm)
        gw = np.matmul(gm, np.swapaxes(cols, 2, 3)).sum(axis=0).reshape(weight.shape)
        if pointwise:
            gx_s = gcols.reshape(B, C, Ho, Wo)
            if stride > 1:
                gx = np.zeros_like(xd)
                gx[:, :, ::stride, ::stride] = gx_s
            else:
                gx = gx_s
        else:
            gc = gcols.reshape(B, C, kh, kw, Ho, Wo)
            gxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=xd.dtype)
            hspan = stride * (Ho - 1) + 1
            wspan = stride * (Wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + hspan : stride, j : j + wspan : stride] += gc[:, :, i, j]
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    return Tensor._node(out, parents, bw, "conv2d")


def _depthwise(x, weight, bias, stride, padding, Ho, Wo, parents):
    # one filter per channel: accumulate kh*kw shifted slices instead of im2col
    B, C, H, W = x.shape
    _, _, kh, kw = weight.shape
    xd = x.data
    wd = weight.data[:, 0]
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    hspan = stride * (Ho - 1) + 1
    wspan = stride * (Wo - 1) + 1
    out = np.zeros((B, C, Ho, Wo), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i : i + hspan : stride, j : j + wspan : stride] * wd[None, :, i, j, None, None]
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=xd.dtype)
        gw = np.empty(weight.shape, dtype=wd.dtype)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None), slice(i, i + hspan, stride), slice(j, j + wspan, stride))
                gxp[sl] += g * wd[None, :, i, j, None, None]
                gw[:, 0, i, j] = np.einsum("bchw,bchw->c", g, xp[sl])
        gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    return Tensor._node(out, parents, bw, "conv2d_dw")


# ---------------------------------------------------------------------------
# patches and pooling
# ---------------------------------------------------------------------------


def unfold_patches(x: Tensor, p: int) -> Tensor:
    """[B, C, H, W] -> [B, (H/p)*(W/p), p*p, C].

    Patches are listed in row-major order over the patch grid; within a patch
    pixels are in row-major order.
    """
    B, C, H, W = x.shape
    if p < 1 or H % p or W % p:
        raise PatchMismatch(f"patch size {p} does not divide {H}x{W}")
    nh, nw = H // p, W // p
    return x.reshape(B, C, nh, p, nw, p).transpose(0, 2, 4, 3, 5, 1).reshape(B, nh * nw, p * p, C)


def fold_patches(x: Tensor, p: int, height: int, width: int) -> Tensor:
    """Inverse of :func:`unfold_patches`."""
    B, N, P, C = x.shape
    if p < 1 or height % p or width % p or P != p * p or N != (height // p) * (width // p):
        raise PatchMismatch(f"cannot fold {x.shape} with p={p} into {height}x{width}")
    nh, nw = height // p, width // p
    return x.reshape(B, nh, nw, p, p, C).transpose(0, 5, 1, 3, 2, 4).reshape(B, C, height, width)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeMismatch(f"global_avg_pool expects [B,C,H,W], got {x.shape}")
    return reduce(x, "mean", (2, 3))
