"""Layers and composite blocks.

Modules register their parameters and sub-modules on attribute assignment, so
``named_parameters`` yields dotted paths (``stages.3.attn.q_proj.weight``) in
construction order. A module can be "tapped": its next forward output is kept
in ``module.tapped`` with gradient retention enabled (used by Grad-CAM).
"""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import functional as F
from .errors import InvalidConfig, PatchMismatch, ShapeMismatch
from .tensor import Parameter, Tensor, concat, create


def _param(shape, init, gen, dtype, **kw) -> Parameter:
    t = create(shape, init, rng=gen, dtype=dtype, **kw)
    return Parameter(t.data)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "tap", False)
        object.__setattr__(self, "tapped", None)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        out = self.forward(*args, **kwargs)
        if self.tap:
            out.retain_grad()
            self.tapped = out
        return out

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, m in self._modules.items():
            yield from m.named_modules(f"{prefix}{name}.")

    def get_submodule(self, path: str) -> "Module":
        mod = self
        for part in path.split(".") if path else []:
            try:
                mod = mod._modules[part]
            except KeyError:
                raise KeyError(f"no submodule {path!r}") from None
        return mod

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, m: Module):
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Sequential(ModuleList):
    def forward(self, x):
        for m in self._items:
            x = m(x)
        return x


class Identity(Module):
    def forward(self, x):
        return x


# ---------------------------------------------------------------------------
# primitive layers
# ---------------------------------------------------------------------------


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, gen, bias: bool = True, dtype=np.float32):
        super().__init__()
        self.weight = _param((d_out, d_in), "trunc_normal", gen, dtype, std=0.02)
        self.bias = _param((d_out,), "zeros", gen, dtype) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    """Convolution with optional fused activation, He-normal weights."""

    def __init__(self, c_in, c_out, kernel, gen, stride=1, groups=1, bias=True, act=None, dtype=np.float32):
        super().__init__()
        if c_in % groups or c_out % groups:
            raise InvalidConfig(f"groups={groups} must divide {c_in} and {c_out}")
        fan_in = (c_in // groups) * kernel * kernel
        self.weight = _param((c_out, c_in // groups, kernel, kernel), "normal", gen, dtype, std=math.sqrt(2.0 / fan_in))
        self.bias = _param((c_out,), "zeros", gen, dtype) if bias else None
        self.stride = stride
        self.padding = kernel // 2
        self.groups = groups
        self.act = act

    def forward(self, x):
        y = F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)
        return F.activation(y, self.act) if self.act else y


class LayerNorm(Module):
    def __init__(self, d: int, gen=None, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.weight = Parameter(np.ones(d), dtype=dtype)
        self.bias = Parameter(np.zeros(d), dtype=dtype)
        self.eps = eps

    def forward(self, x):
        return F.layer_norm(x, self.weight, self.bias, self.eps)


# ---------------------------------------------------------------------------
# convolutional blocks
# ---------------------------------------------------------------------------


class MobileNetV2Block(Module):
    """Inverted residual: 1x1 expand -> 3x3 depthwise -> 1x1 project."""

    def __init__(self, c_in, c_out, stride, expansion, gen, act="silu", dtype=np.float32):
        super().__init__()
        if stride not in (1, 2):
            raise InvalidConfig(f"stride must be 1 or 2, got {stride}")
        hidden = int(round(c_in * expansion))
        self.expand = Conv2d(c_in, hidden, 1, gen, act=act, dtype=dtype)
        self.depthwise = Conv2d(hidden, hidden, 3, gen, stride=stride, groups=hidden, act=act, dtype=dtype)
        self.project = Conv2d(hidden, c_out, 1, gen, dtype=dtype)
        self.use_residual = stride == 1 and c_in == c_out
        self.c_in = c_in

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeMismatch(f"expected [B,{self.c_in},H,W], got {x.shape}")
        y = self.project(self.depthwise(self.expand(x)))
        return x + y if self.use_residual else y


# ---------------------------------------------------------------------------
# transformer pieces
# ---------------------------------------------------------------------------


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, gen, dtype=np.float32):
        super().__init__()
        if heads < 1 or d % heads:
            raise InvalidConfig(f"heads={heads} must divide embed dim {d}")
        self.d, self.heads = d, heads
        self.q_proj = Linear(d, d, gen, dtype=dtype)
        self.k_proj = Linear(d, d, gen, dtype=dtype)
        self.v_proj = Linear(d, d, gen, dtype=dtype)
        self.out_proj = Linear(d, d, gen, dtype=dtype)
        self.last_attention: np.ndarray | None = None

    def _split(self, t: Tensor) -> Tensor:
        *lead, n, d = t.shape
        hd = d // self.heads
        nl = len(lead)
        perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)
        return t.reshape(*lead, n, self.heads, hd).transpose(perm)

    def forward(self, x):
        if x.shape[-1] != self.d:
            raise ShapeMismatch(f"expected last dim {self.d}, got {x.shape}")
        *lead, n, d = x.shape
        nl = len(lead)
        q, k, v = self._split(self.q_proj(x)), self._split(self.k_proj(x)), self._split(self.v_proj(x))
        scale = 1.0 / math.sqrt(d // self.heads)
        scores = (q * scale) @ k.swapaxes(-1, -2)
        attn = F.softmax(scores, axis=-1)
        self.last_attention = attn.data
        ctx = attn @ v  # (..., heads, n, hd)
        perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)
        ctx = ctx.transpose(perm).reshape(*lead, n, d)
        return self.out_proj(ctx)


class MLP(Module):
    def __init__(self, d: int, hidden: int, gen, act="gelu", dtype=np.float32):
        super().__init__()
        self.fc1 = Linear(d, hidden, gen, dtype=dtype)
        self.fc2 = Linear(hidden, d, gen, dtype=dtype)
        self.act = act

    def forward(self, x):
        return self.fc2(F.activation(self.fc1(x), self.act))


class TransformerEncoderLayer(Module):
    """Pre-norm encoder layer: x + MHA(LN(x)), then + MLP(LN(.))."""

    def __init__(self, d: int, heads: int, mlp_ratio: float, gen, act="gelu", dtype=np.float32):
        super().__init__()
        self.norm1 = LayerNorm(d, dtype=dtype)
        self.attn = MultiHeadAttention(d, heads, gen, dtype=dtype)
        self.norm2 = LayerNorm(d, dtype=dtype)
        self.mlp = MLP(d, int(round(d * mlp_ratio)), gen, act=act, dtype=dtype)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class MobileViTBlock(Module):
    """Local conv features, global transformer mixing across patches, fusion.

    Transformers attend across patches for each fixed pixel position inside
    a patch, so the pixel order within patches is kept through unfold/fold.
    """

    def __init__(self, channels, d, patch, depth, heads, mlp_ratio, gen, act="silu", dtype=np.float32):
        super().__init__()
        self.channels, self.d, self.patch = channels, d, patch
        self.local = Conv2d(channels, channels, 3, gen, act=act, dtype=dtype)
        self.to_embed = Conv2d(channels, d, 1, gen, bias=False, dtype=dtype)
        self.transformer = Sequential(
            TransformerEncoderLayer(d, heads, mlp_ratio, gen, act=act, dtype=dtype) for _ in range(depth)
        )
        self.from_embed = Conv2d(d, channels, 1, gen, act=act, dtype=dtype)
        self.fusion = Conv2d(2 * channels, channels, 3, gen, act=act, dtype=dtype)

    def forward(self, x):
        B, C, H, W = x.shape
        if C != self.channels:
            raise ShapeMismatch(f"expected {self.channels} channels, got {C}")
        p = self.patch
        if H % p or W % p:
            raise PatchMismatch(f"patch size {p} does not divide {H}x{W}")
        y = self.to_embed(self.local(x))
        patches = F.unfold_patches(y, p)  # B, N, p*p, d
        n = patches.shape[1]
        seq = patches.transpose(0, 2, 1, 3).reshape(B * p * p, n, self.d)
        seq = self.transformer(seq)
        patches = seq.reshape(B, p * p, n, self.d).transpose(0, 2, 1, 3)
        y = self.from_embed(F.fold_patches(patches, p, H, W))
        return self.fusion(concat([x, y], axis=1))


class PatchEmbed(Module):
    """Non-overlapping patch projection with class token and learned positions."""

    def __init__(self, image_size: int, patch: int, d: int, gen, in_ch: int = 3, dtype=np.float32):
        super().__init__()
        if image_size % patch:
            raise PatchMismatch(f"patch size {patch} does not divide {image_size}")
        self.image_size, self.patch, self.d = image_size, patch, d
        self.num_patches = (image_size // patch) ** 2
        self.proj = Linear(patch * patch * in_ch, d, gen, dtype=dtype)
        self.cls_token = _param((1, 1, d), "trunc_normal", gen, dtype, std=0.02)
        self.pos_embed = _param((1, self.num_patches + 1, d), "trunc_normal", gen, dtype, std=0.02)

    def forward(self, x):
        B, C, H, W = x.shape
        if H % self.patch or W % self.patch:
            raise PatchMismatch(f"patch size {self.patch} does not divide {H}x{W}")
        if H != self.image_size or W != self.image_size:
            raise ShapeMismatch(f"expected {self.image_size}x{self.image_size} input, got {H}x{W}")
        patches = F.unfold_patches(x, self.patch)  # B, N, P*P, C
        tokens = self.proj(patches.reshape(B, self.num_patches, -1))
        cls = self.cls_token * Tensor(np.ones((B, 1, 1), dtype=x.dtype))
        return concat([cls, tokens], axis=1) + self.pos_embed
