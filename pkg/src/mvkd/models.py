"""Student (MobileViT-style) and teacher (ViT patch-32) classifiers.

Also owns parameter accounting and the checkpoint file format::

    b"MVKD1\\n" | u64 little-endian header length | JSON header | f32 LE payload

The header carries the model config, a tensor directory (name, shape, dtype,
byte offset and size relative to the payload start) and free-form training
metadata.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import functional as F
from .blocks import (
    Conv2d,
    LayerNorm,
    Linear,
    MobileNetV2Block,
    MobileViTBlock,
    Module,
    PatchEmbed,
    Sequential,
    TransformerEncoderLayer,
)
from .errors import CorruptCheckpoint, FormatError, InvalidConfig, IoError, ShapeMismatch, UnsupportedModel
from .tensor import Rng, Tensor

MAGIC = b"MVKD1\n"
KINDS = ("student_s", "student_xs", "teacher_vit32")

# Reference widths at scale=1 (MobileViT-S / -XS, ViT-B/32).
_STUDENT_BASE = {
    "student_s": dict(
        stem_channels=16, mv2_channels=[32, 64], vit_channels=[96, 128, 160],
        vit_dims=[144, 192, 240], last_channels=640,
    ),
    "student_xs": dict(
        stem_channels=16, mv2_channels=[32, 48], vit_channels=[64, 80, 96],
        vit_dims=[96, 120, 144], last_channels=384,
    ),
}


def _scaled(c: int, scale: float, multiple: int = 4) -> int:
    return max(multiple, int(round(c * scale / multiple)) * multiple)


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    Fields left as None are derived from ``kind`` and ``scale`` by
    :meth:`resolved`; explicit values always win.
    """

    kind: str = "student_s"
    num_classes: int = 2
    input_size: int = 64
    scale: float = 0.25
    # student
    stem_channels: int | None = None
    mv2_channels: list[int] | None = None
    layer2_blocks: int = 3
    vit_channels: list[int] | None = None
    vit_dims: list[int] | None = None
    vit_depths: list[int] = field(default_factory=lambda: [2, 4, 3])
    last_channels: int | None = None
    expansion: float = 4.0
    patch_size: int | None = None
    # shared transformer knobs
    heads: int | None = None
    mlp_ratio: float | None = None
    # teacher
    embed_dim: int | None = None
    depth: int | None = None
    # fixed per-channel input standardization, (x - mean) / std; None = identity
    input_mean: list[float] | None = None
    input_std: list[float] | None = None

    @property
    def is_student(self) -> bool:
        return self.kind.startswith("student")

    def resolved(self) -> "ModelConfig":
        if self.kind not in KINDS:
            raise UnsupportedModel(f"unknown model kind {self.kind!r}")
        cfg = dataclasses.replace(self)
        s = cfg.scale
        if cfg.is_student:
            base = _STUDENT_BASE[cfg.kind]
            if cfg.stem_channels is None:
                cfg.stem_channels = _scaled(base["stem_channels"], s)
            if cfg.mv2_channels is None:
                cfg.mv2_channels = [_scaled(c, s) for c in base["mv2_channels"]]
            if cfg.vit_channels is None:
                cfg.vit_channels = [_scaled(c, s) for c in base["vit_channels"]]
            if cfg.vit_dims is None:
                cfg.vit_dims = [_scaled(c, s) for c in base["vit_dims"]]
            if cfg.last_channels is None:
                cfg.last_channels = _scaled(base["last_channels"], s)
            if cfg.patch_size is None:
                cfg.patch_size = 2
            if cfg.heads is None:
                cfg.heads = 4
            if cfg.mlp_ratio is None:
                cfg.mlp_ratio = 2.0
        else:
            if cfg.patch_size is None:
                cfg.patch_size = 32
            if cfg.heads is None:
                cfg.heads = max(1, int(round(12 * s))) if s < 1 else 12
            if cfg.embed_dim is None:
                cfg.embed_dim = _scaled(768, s, multiple=cfg.heads * 4 if s < 1 else 4)
            if cfg.depth is None:
                cfg.depth = 12 if s >= 1 else 4
            if cfg.mlp_ratio is None:
                cfg.mlp_ratio = 4.0
        cfg.validate()
        return cfg

    def validate(self):
        for name in ("input_mean", "input_std"):
            v = getattr(self, name)
            if v is not None and len(v) != 3:
                raise InvalidConfig(f"{name} needs 3 channel values, got {v}")
        if self.input_std is not None and min(self.input_std) <= 0:
            raise InvalidConfig(f"input_std must be positive, got {self.input_std}")
        if self.num_classes < 2:
            raise InvalidConfig(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_size < 1:
            raise InvalidConfig(f"input_size must be positive, got {self.input_size}")
        if self.is_student:
            # stem, layer2..layer5 each halve the resolution
            final_res = self.input_size
            for _ in range(5):
                if final_res % 2:
                    raise InvalidConfig(f"input_size {self.input_size} not divisible by 32")
                final_res //= 2
            for i, res in enumerate((self.input_size // 8, self.input_size // 16, self.input_size // 32)):
                if res % self.patch_size:
                    raise InvalidConfig(
                        f"MobileViT stage {i} resolution {res} not divisible by patch {self.patch_size}"
                    )
            for d in self.vit_dims:
                if d % self.heads:
                    raise InvalidConfig(f"heads={self.heads} must divide embed dim {d}")
            if len(self.mv2_channels) != 2 or len(self.vit_channels) != 3 or len(self.vit_dims) != 3:
                raise InvalidConfig("student needs 2 MobileNetV2 widths and 3 MobileViT widths/dims")
            if len(self.vit_depths) != 3 or self.layer2_blocks < 1:
                raise InvalidConfig("student needs 3 transformer depths and layer2_blocks >= 1")
        else:
            if self.input_size % self.patch_size:
                raise InvalidConfig(f"patch {self.patch_size} does not divide input {self.input_size}")
            if self.embed_dim % self.heads:
                raise InvalidConfig(f"heads={self.heads} must divide embed dim {self.embed_dim}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidConfig(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _standardize(cfg: ModelConfig, x: Tensor) -> Tensor:
    if cfg.input_mean is not None:
        x = x - np.asarray(cfg.input_mean, dtype=x.dtype).reshape(1, 3, 1, 1)
    if cfg.input_std is not None:
        x = x * (1.0 / np.asarray(cfg.input_std, dtype=np.float64)).astype(x.dtype).reshape(1, 3, 1, 1)
    return x


class StudentNet(Module):
    """conv stem -> MobileNetV2 stages -> 3 MobileViT stages -> 1x1 conv -> GAP -> linear."""

    def __init__(self, cfg: ModelConfig, gen, dtype=np.float32):
        super().__init__()
        self.config = cfg
        kw = dict(dtype=dtype)
        e = cfg.expansion
        c1, c2 = cfg.mv2_channels
        self.stem = Conv2d(3, cfg.stem_channels, 3, gen, stride=2, act="silu", **kw)
        self.layer1 = Sequential([MobileNetV2Block(cfg.stem_channels, c1, 1, e, gen, **kw)])
        layer2 = [MobileNetV2Block(c1, c2, 2, e, gen, **kw)]
        layer2 += [MobileNetV2Block(c2, c2, 1, e, gen, **kw) for _ in range(cfg.layer2_blocks - 1)]
        self.layer2 = Sequential(layer2)
        c_prev = c2
        for i, (c, d, depth) in enumerate(zip(cfg.vit_channels, cfg.vit_dims, cfg.vit_depths)):
            stage = Sequential([
                MobileNetV2Block(c_prev, c, 2, e, gen, **kw),
                MobileViTBlock(c, d, cfg.patch_size, depth, cfg.heads, cfg.mlp_ratio, gen, **kw),
            ])
            setattr(self, f"layer{i + 3}", stage)
            c_prev = c
        self.final_conv = Conv2d(c_prev, cfg.last_channels, 1, gen, act="silu", **kw)
        self.head = Linear(cfg.last_channels, cfg.num_classes, gen, **kw)

    def features(self, x: Tensor) -> Tensor:
        x = self.stem(_standardize(self.config, x))
        for name in ("layer1", "layer2", "layer3", "layer4", "layer5"):
            x = getattr(self, name)(x)
        return self.final_conv(x)

    def forward(self, x):
        return self.head(F.global_avg_pool(self.features(x)))


class TeacherNet(Module):
    """Patch embedding -> pre-norm encoder -> LayerNorm -> linear head on the class token."""

    def __init__(self, cfg: ModelConfig, gen, dtype=np.float32):
        super().__init__()
        self.config = cfg
        self.embed = PatchEmbed(cfg.input_size, cfg.patch_size, cfg.embed_dim, gen, dtype=dtype)
        self.encoder = Sequential(
            TransformerEncoderLayer(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, gen, act="gelu", dtype=dtype)
            for _ in range(cfg.depth)
        )
        self.norm = LayerNorm(cfg.embed_dim, dtype=dtype)
        self.head = Linear(cfg.embed_dim, cfg.num_classes, gen, dtype=dtype)

    def forward(self, x):
        tokens = self.norm(self.encoder(self.embed(_standardize(self.config, x))))
        return self.head(tokens[:, 0, :])


def build_model(cfg: ModelConfig, rng: Rng | int = 0, dtype=np.float32) -> Module:
    """Instantiate a model; parameters are drawn from ``rng``'s init stream."""
    cfg = cfg.resolved()
    if not isinstance(rng, Rng):
        rng = Rng(rng)
    gen = rng.stream("init")
    net = StudentNet(cfg, gen, dtype) if cfg.is_student else TeacherNet(cfg, gen, dtype)
    return net


def forward(model: Module, x: Tensor, train_mode: bool = False) -> Tensor:
    """Raw logits. ``train_mode`` is accepted for API symmetry; no layer behaves differently."""
    cfg = model.config
    if x.ndim != 4 or x.shape[1:] != (3, cfg.input_size, cfg.input_size):
        raise ShapeMismatch(f"expected [B,3,{cfg.input_size},{cfg.input_size}], got {x.shape}")
    return model(x)


def param_count(model: Module) -> int:
    return sum(int(p.size) for p in model.parameters())


def model_size_bytes(model: Module, meta: dict | None = None) -> int:
    """Size of the serialized checkpoint (f32 payload plus header)."""
    return len(checkpoint_bytes(model, meta))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def checkpoint_bytes(model: Module, meta: dict | None = None) -> bytes:
    directory, chunks, offset = [], [], 0
    for name, p in model.named_parameters():
        buf = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(p.shape), "dtype": "f32", "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    header = {
        "format": 1,
        "config": model.config.to_dict(),
        "tensors": directory,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<Q", len(hbytes)))
    out.write(hbytes)
    for c in chunks:
        out.write(c)
    return out.getvalue()


def save_checkpoint(model: Module, meta: dict | None, path) -> Path:
    path = Path(path)
    data = checkpoint_bytes(model, meta)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def read_checkpoint(path) -> tuple[dict, memoryview]:
    """Parse and validate a checkpoint; returns (header, payload)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:len(MAGIC)]!r}")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise CorruptCheckpoint(f"{path}: truncated header length")
    (hlen,) = struct.unpack("<Q", raw[pos : pos + 8])
    pos += 8
    if pos + hlen > len(raw):
        raise CorruptCheckpoint(f"{path}: header extends past end of file")
    try:
        header = json.loads(raw[pos : pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from None
    payload = memoryview(raw)[pos + hlen :]
    expected = 0
    for entry in header.get("tensors", []):
        n = int(np.prod(entry["shape"])) * 4 if entry["shape"] else 4
        if entry["dtype"] != "f32" or entry["nbytes"] != n:
            raise FormatError(f"{path}: bad directory entry {entry['name']}")
        if entry["offset"] != expected:
            raise CorruptCheckpoint(f"{path}: directory entry {entry['name']} out of order or overlapping")
        expected += n
        if expected > len(payload):
            raise CorruptCheckpoint(f"{path}: tensor {entry['name']} extends past payload ({len(payload)} bytes)")
    if expected != len(payload):
        raise CorruptCheckpoint(f"{path}: payload is {len(payload)} bytes, directory needs {expected}")
    return header, payload


def load_checkpoint(path, dtype=np.float32) -> tuple[Module, dict]:
    """Rebuild the model stored at ``path``; returns (model, meta)."""
    header, payload = read_checkpoint(path)
    cfg_dict = header.get("config", {})
    if cfg_dict.get("kind") not in KINDS:
        raise UnsupportedModel(f"{path}: unsupported model kind {cfg_dict.get('kind')!r}")
    cfg = ModelConfig.from_dict(cfg_dict)
    model = build_model(cfg, Rng(0), dtype=dtype)
    params = dict(model.named_parameters())
    entries = header["tensors"]
    if [e["name"] for e in entries] != list(params):
        raise CorruptCheckpoint(f"{path}: tensor directory does not match the model architecture")
    for e in entries:
        p = params[e["name"]]
        if tuple(e["shape"]) != p.shape:
            raise CorruptCheckpoint(f"{path}: shape mismatch for {e['name']}")
        arr = np.frombuffer(payload[e["offset"] : e["offset"] + e["nbytes"]], dtype="<f4")
        p.data = arr.reshape(p.shape).astype(dtype)
    return model, header.get("meta", {})
