import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvkd.blocks import Conv2d, Module
from mvkd.data import decode_ppm
from mvkd.errors import InvalidLabel, InvalidTarget, ShapeMismatch
from mvkd.evaluate import (
    Heatmap,
    colormap,
    confusion_matrix,
    grad_cam,
    metrics,
    overlay_panels,
    render_overlay,
)
from mvkd.models import ModelConfig, build_model
from mvkd.tensor import concat


# -- confusion matrix and metrics --------------------------------------------


def test_hand_counted_confusion_matrix():
    cm = confusion_matrix([0, 0, 0, 0, 1, 1, 1, 1, 1, 1], [0, 0, 0, 1, 1, 1, 1, 1, 0, 0], 2)
    assert cm.counts.tolist() == [[3, 1], [2, 4]]
    r = metrics(cm)
    assert r.accuracy == pytest.approx(0.7)
    assert r.precision == pytest.approx([0.6, 0.8])
    assert r.recall == pytest.approx([0.75, 2 / 3])
    assert r.f1 == pytest.approx([2 / 3, 8 / 11])
    assert r.macro_f1 == pytest.approx(0.6970, abs=1e-4)


def test_perfect_and_empty():
    cm = confusion_matrix([0] * 5 + [1] * 5, [0] * 5 + [1] * 5, 2)
    assert cm.counts.tolist() == [[5, 0], [0, 5]]
    r = metrics(cm)
    assert r.accuracy == r.macro_precision == r.macro_recall == r.macro_f1 == 1.0
    empty = metrics(confusion_matrix([], [], 3))
    assert empty.count == 0 and empty.accuracy == 0.0 and empty.macro_f1 == 0.0


def test_never_predicted_class_scores_zero():
    r = metrics(confusion_matrix([0, 1, 2, 2], [0, 1, 1, 1], 3))
    assert r.precision[2] == r.recall[2] == r.f1[2] == 0.0
    assert r.precision[0] == r.recall[0] == 1.0


def test_out_of_range_labels():
    with pytest.raises(InvalidLabel):
        confusion_matrix([0, 2], [0, 1], 2)
    with pytest.raises(InvalidLabel):
        confusion_matrix([0, 1], [0, -1], 2)


def brute_force(y, p, c):
    counts = [[0] * c for _ in range(c)]
    for t, q in zip(y, p):
        counts[t][q] += 1
    prec, rec, f1 = [], [], []
    for k in range(c):
        tp = counts[k][k]
        col = sum(counts[i][k] for i in range(c))
        row = sum(counts[k])
        pk = tp / col if col else 0.0
        rk = tp / row if row else 0.0
        prec.append(pk)
        rec.append(rk)
        f1.append(2 * pk * rk / (pk + rk) if pk + rk else 0.0)
    n = len(y)
    acc = sum(counts[k][k] for k in range(c)) / n if n else 0.0
    return counts, acc, prec, rec, f1, sum(f1) / c


def test_metrics_match_brute_force_oracle_on_100_instances():
    g = np.random.default_rng(2024)
    for _ in range(100):
        c = int(g.integers(2, 13))
        n = int(g.integers(0, 80))
        weights = g.dirichlet(np.ones(c))  # imbalanced classes
        y = g.choice(c, size=n, p=weights).tolist()
        p = [t if g.random() < 0.6 else int(g.integers(c)) for t in y]
        counts, acc, prec, rec, f1, macro = brute_force(y, p, c)
        r = metrics(confusion_matrix(y, p, c))
        assert r.count == n
        assert acc == r.accuracy
        assert prec == r.precision and rec == r.recall and f1 == r.f1
        assert macro == pytest.approx(r.macro_f1, abs=1e-15)
        assert confusion_matrix(y, p, c).counts.tolist() == counts


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8).flatmap(lambda c: st.tuples(st.just(c), st.lists(st.integers(0, c - 1), min_size=1, max_size=40))))
def test_metric_invariants(case):
    c, y = case
    assert metrics(confusion_matrix(y, y, c)).accuracy == 1.0
    p = [(t + 1) % c if i % 3 == 0 else t for i, t in enumerate(y)]
    r = metrics(confusion_matrix(y, p, c))
    for k in range(c):
        assert 0 <= r.f1[k] <= max(r.precision[k], r.recall[k]) + 1e-12
    # relabel classes with a permutation
    perm = list(reversed(range(c)))
    rp = metrics(confusion_matrix([perm[t] for t in y], [perm[q] for q in p], c))
    assert rp.accuracy == r.accuracy
    assert rp.macro_f1 == pytest.approx(r.macro_f1, abs=1e-12)
    assert [rp.f1[perm[k]] for k in range(c)] == pytest.approx(r.f1)


def test_report_exports(tmp_path):
    cm = confusion_matrix([0, 1, 1], [0, 1, 0], 2, ["fire", "non_fire"])
    cm.to_csv(tmp_path / "cm.csv")
    assert (tmp_path / "cm.csv").read_text().splitlines() == ["true\\pred,fire,non_fire", "fire,1,0", "non_fire,1,1"]
    d = metrics(cm).to_dict()
    assert set(d["per_class"]) == {"fire", "non_fire"} and d["averaging"] == "macro"


# -- Grad-CAM -----------------------------------------------------------------


class OneChannel(Module):
    """A = red channel (1x1 conv); logit_0 = mean(A) + b, logit_1 = 0."""

    def __init__(self, head=1.0, bias=0.0):
        super().__init__()
        self.feat = Conv2d(3, 1, 1, np.random.default_rng(0), dtype=np.float64)
        self.feat.weight.data[:] = 0
        self.feat.weight.data[0, 0] = 1.0
        self.head, self.bias = head, bias

    def forward(self, x):
        a = self.feat(x)
        logit = a.mean(axis=(1, 2, 3)).reshape(-1, 1) * self.head + self.bias
        return concat([logit, logit * 0.0], axis=1)


def _image(seed=0, size=8):
    img = np.random.default_rng(seed).uniform(-1, 1, size=(3, size, size))
    return img


def test_gradcam_one_channel_oracle():
    img = _image()
    h = grad_cam(OneChannel(), img, 0, "feat")
    expected = np.maximum(img[0], 0)
    expected /= expected.max()
    assert h.values.shape == (8, 8)
    assert np.corrcoef(h.values.ravel(), expected.ravel())[0, 1] > 0.999
    assert np.unravel_index(h.values.argmax(), h.values.shape) == np.unravel_index(img[0].argmax(), (8, 8))
    assert h.values.max() == 1.0 and h.values.min() >= 0.0


def test_gradcam_invariant_to_logit_bias():
    img = _image(1)
    a = grad_cam(OneChannel(bias=0.0), img, 0, "feat").values
    b = grad_cam(OneChannel(bias=5.0), img, 0, "feat").values
    np.testing.assert_array_equal(a, b)


def test_gradcam_zero_gradient_gives_zero_map():
    h = grad_cam(OneChannel(head=0.0), _image(2), 0, "feat")
    assert not h.values.any()


def test_gradcam_errors():
    with pytest.raises(InvalidTarget):
        grad_cam(OneChannel(), _image(), 0, "missing")
    with pytest.raises(InvalidLabel):
        grad_cam(OneChannel(), _image(), 2, "feat")
    with pytest.raises(ShapeMismatch):
        grad_cam(OneChannel(), np.zeros((2, 3, 8, 8)), 0, "feat")


def test_gradcam_on_student_default_layer():
    cfg = ModelConfig(kind="student_s", num_classes=2, input_size=64, scale=0.125, expansion=2.0, layer2_blocks=1, vit_depths=[1, 1, 1])
    model = build_model(cfg, 0)
    img = np.random.default_rng(0).uniform(size=(3, 64, 64)).astype(np.float32)
    h = grad_cam(model, img, 1)
    assert h.layer == "final_conv" and h.values.shape == (64, 64)
    assert 0.0 <= h.values.min() and h.values.max() <= 1.0
    assert all(p.grad is None for p in model.parameters())


# -- overlays -----------------------------------------------------------------


def test_colormap_is_monotone():
    v = np.linspace(0, 1, 101)[None]
    rgb = colormap(v)
    assert np.all(np.diff(rgb, axis=2) >= 0)
    np.testing.assert_array_equal(rgb[:, 0, 0], [0, 0, 0])
    np.testing.assert_array_equal(rgb[:, 0, -1], [1, 1, 1])


def test_overlay_layout_and_zero_heatmap(tmp_path):
    img = np.random.default_rng(3).uniform(size=(3, 6, 5))
    zero = Heatmap(np.zeros((6, 5)), 0)
    panels = overlay_panels(zero, img)
    assert panels.shape == (3, 6, 10)
    np.testing.assert_array_equal(panels[:, :, :5], img)
    gray = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    np.testing.assert_allclose(panels[:, :, 5:], np.broadcast_to(0.5 * gray, (3, 6, 5)), atol=1e-12)
    path = render_overlay(zero, img, tmp_path / "o.ppm")
    assert decode_ppm(path.read_bytes()).shape == (3, 6, 10)


def test_overlay_hottest_pixel():
    img = np.zeros((3, 4, 4))
    values = np.zeros((4, 4))
    values[1, 2] = 1.0
    right = overlay_panels(Heatmap(values, 0), img)[:, :, 4:]
    np.testing.assert_allclose(right[:, 1, 2], 0.5 * colormap(np.array([[1.0]]))[:, 0, 0])
    assert right.sum(axis=0).argmax() == np.ravel_multi_index((1, 2), (4, 4))


def test_overlay_mismatch():
    with pytest.raises(ShapeMismatch):
        overlay_panels(Heatmap(np.zeros((4, 4)), 0), np.zeros((3, 4, 5)))
