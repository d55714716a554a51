import dataclasses

import numpy as np
import pytest

from mvkd import functional as F
from mvkd.errors import CorruptCheckpoint, FormatError, InvalidConfig, ShapeMismatch, UnsupportedModel
from mvkd.models import (
    MAGIC,
    ModelConfig,
    build_model,
    checkpoint_bytes,
    forward,
    load_checkpoint,
    model_size_bytes,
    param_count,
    read_checkpoint,
    save_checkpoint,
)
from mvkd.tensor import Rng, Tensor

TINY_STUDENT = ModelConfig(
    kind="student_s",
    num_classes=3,
    input_size=64,
    stem_channels=4,
    mv2_channels=[4, 8],
    layer2_blocks=2,
    vit_channels=[8, 8, 8],
    vit_dims=[4, 4, 4],
    vit_depths=[1, 2, 1],
    last_channels=8,
    expansion=2.0,
    heads=2,
    mlp_ratio=2.0,
)
TINY_TEACHER = ModelConfig(kind="teacher_vit32", num_classes=3, input_size=64, embed_dim=8, depth=2, heads=2, mlp_ratio=2.0)


# closed-form counts, written independently of the module code
def conv(cin, cout, k, groups=1, bias=True):
    return cout * (cin // groups) * k * k + (cout if bias else 0)


def linear(a, b):
    return a * b + b


def mv2(cin, cout, e):
    h = int(round(cin * e))
    return conv(cin, h, 1) + conv(h, h, 3, groups=h) + conv(h, cout, 1)


def encoder(d, ratio):
    h = int(round(d * ratio))
    return 2 * 2 * d + 4 * linear(d, d) + linear(d, h) + linear(h, d)


def mobilevit(c, d, depth, ratio):
    return conv(c, c, 3) + conv(c, d, 1, bias=False) + depth * encoder(d, ratio) + conv(d, c, 1) + conv(2 * c, c, 3)


def student_count(cfg):
    e = cfg.expansion
    c1, c2 = cfg.mv2_channels
    n = conv(3, cfg.stem_channels, 3) + mv2(cfg.stem_channels, c1, e) + mv2(c1, c2, e)
    n += (cfg.layer2_blocks - 1) * mv2(c2, c2, e)
    prev = c2
    for c, d, depth in zip(cfg.vit_channels, cfg.vit_dims, cfg.vit_depths):
        n += mv2(prev, c, e) + mobilevit(c, d, depth, cfg.mlp_ratio)
        prev = c
    return n + conv(prev, cfg.last_channels, 1) + linear(cfg.last_channels, cfg.num_classes)


def teacher_count(cfg, patch=32):
    d = cfg.embed_dim
    tokens = (cfg.input_size // patch) ** 2
    return linear(patch * patch * 3, d) + d + (tokens + 1) * d + cfg.depth * encoder(d, cfg.mlp_ratio) + 2 * d + linear(d, cfg.num_classes)


def test_tiny_student_param_count_closed_form():
    assert param_count(build_model(TINY_STUDENT)) == student_count(TINY_STUDENT)


def test_tiny_teacher_param_count_closed_form():
    assert param_count(build_model(TINY_TEACHER)) == teacher_count(TINY_TEACHER)


def test_desk_scale_param_counts_closed_form():
    for kind in ("student_s", "student_xs"):
        cfg = ModelConfig(kind=kind, scale=0.25).resolved()
        assert param_count(build_model(cfg)) == student_count(cfg)


def test_build_determinism():
    a, b = build_model(TINY_STUDENT, Rng(5)), build_model(TINY_STUDENT, Rng(5))
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()
    c = build_model(TINY_STUDENT, Rng(6))
    assert any(pa.data.tobytes() != pc.data.tobytes() for pa, pc in zip(a.parameters(), c.parameters()))


@pytest.mark.parametrize("cfg", [TINY_STUDENT, TINY_TEACHER], ids=["student", "teacher"])
def test_forward_contract(cfg):
    model = build_model(cfg, dtype=np.float64)
    x = np.random.default_rng(0).uniform(size=(4, 3, cfg.input_size, cfg.input_size))
    logits = forward(model, Tensor(x), train_mode=True)
    assert logits.shape == (4, 3)
    np.testing.assert_allclose(F.softmax(logits).data.sum(axis=1), 1.0, atol=1e-6)
    # eval mode is identical (no dropout / batch statistics)
    assert forward(model, Tensor(x)).data.tobytes() == logits.data.tobytes()
    perm = [2, 0, 3, 1]
    np.testing.assert_allclose(forward(model, Tensor(x[perm])).data, logits.data[perm], rtol=0, atol=1e-12)
    dup = forward(model, Tensor(x[[1, 1]])).data
    np.testing.assert_allclose(dup[0], dup[1], rtol=0, atol=0)


def test_forward_size_mismatch():
    model = build_model(TINY_STUDENT)
    with pytest.raises(ShapeMismatch):
        forward(model, Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32)))


def test_invalid_configs():
    with pytest.raises(InvalidConfig):
        ModelConfig(num_classes=1).resolved()
    with pytest.raises(InvalidConfig):
        ModelConfig(input_size=48).resolved()  # 48 / 32 is not an integer
    with pytest.raises(InvalidConfig):
        ModelConfig(kind="teacher_vit32", input_size=48).resolved()
    with pytest.raises(InvalidConfig):
        ModelConfig(input_size=224).resolved()  # final 7x7 map not divisible by patch 2
    with pytest.raises(UnsupportedModel):
        ModelConfig(kind="resnet").resolved()
    with pytest.raises(InvalidConfig):
        ModelConfig.from_dict({"kind": "student_s", "bogus": 1})


def test_gradient_reaches_every_parameter():
    model = build_model(TINY_STUDENT, dtype=np.float64)
    x = Tensor(np.random.default_rng(1).normal(size=(2, 3, 64, 64)))
    (forward(model, x) ** 2).sum().backward()
    for name, p in model.named_parameters():
        assert p.grad is not None, name
    for name in ("stem.weight", "head.weight", "head.bias"):
        assert np.abs(dict(model.named_parameters())[name].grad).max() > 0


def test_input_standardization_is_applied():
    cfg = dataclasses.replace(TINY_STUDENT, input_mean=[0.5, 0.5, 0.5], input_std=[0.25, 0.25, 0.25])
    plain, std = build_model(TINY_STUDENT, dtype=np.float64), build_model(cfg, dtype=np.float64)
    x = np.random.default_rng(2).uniform(size=(1, 3, 64, 64))
    np.testing.assert_allclose(std(Tensor(x)).data, plain(Tensor((x - 0.5) / 0.25)).data, atol=1e-12)
    with pytest.raises(InvalidConfig):
        dataclasses.replace(TINY_STUDENT, input_std=[1.0, 0.0, 1.0]).resolved()


def test_full_scale_ordering_and_student_size():
    # 256 is the native student resolution; counts do not depend on it
    counts = {
        kind: param_count(build_model(ModelConfig(kind=kind, scale=1.0, num_classes=12, input_size=256 if kind != "teacher_vit32" else 224)))
        for kind in ("student_xs", "student_s", "teacher_vit32")
    }
    assert counts["student_xs"] < counts["student_s"] < counts["teacher_vit32"]
    assert 18e6 <= 4 * counts["student_s"] <= 24e6


# -- checkpoints --------------------------------------------------------------


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    model = build_model(TINY_STUDENT, Rng(3))
    path = save_checkpoint(model, {"epoch": 4, "seed": 3}, tmp_path / "m.mvkd")
    loaded, meta = load_checkpoint(path)
    assert meta == {"epoch": 4, "seed": 3}
    assert loaded.config == model.config
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), loaded.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()
    x = Tensor(np.random.default_rng(0).uniform(size=(2, 3, 64, 64)).astype(np.float32))
    assert model(x).data.tobytes() == loaded(x).data.tobytes()


def test_checkpoint_layout(tmp_path):
    model = build_model(TINY_STUDENT)
    raw = checkpoint_bytes(model, {})
    assert raw.startswith(MAGIC) and len(MAGIC) == 6
    header, payload = read_checkpoint(save_checkpoint(model, {}, tmp_path / "m.mvkd"))
    assert len(payload) == 4 * param_count(model)
    assert model_size_bytes(model, {}) == len(raw)
    end = 0
    for entry in header["tensors"]:
        assert entry["offset"] == end
        end += entry["nbytes"]
    assert end == len(payload)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.mvkd"
    path.write_bytes(b"XXXXX\n" + checkpoint_bytes(build_model(TINY_STUDENT))[6:])
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_checkpoint_truncated_payload(tmp_path):
    path = tmp_path / "short.mvkd"
    path.write_bytes(checkpoint_bytes(build_model(TINY_STUDENT))[:-4])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)


def test_checkpoint_unknown_kind(tmp_path):
    raw = checkpoint_bytes(build_model(TINY_STUDENT))
    path = tmp_path / "kind.mvkd"
    path.write_bytes(raw.replace(b'"kind":"student_s"', b'"kind":"student_q"'))
    with pytest.raises(UnsupportedModel):
        load_checkpoint(path)
