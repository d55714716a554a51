"""Confusion matrices, P/R/F1/accuracy reports, Grad-CAM heatmaps and overlays."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blocks import Module
from .data import Dataset, encode_ppm, resize_bilinear
from .distill import predict_logits
from .errors import InvalidLabel, InvalidTarget, IoError, ShapeMismatch
from .tensor import Tensor


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, columns = predicted class
    class_names: list[str] = field(default_factory=list)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self, path) -> Path:
        path = Path(path)
        names = self.class_names or [str(i) for i in range(len(self.counts))]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["true\\pred", *names])
            for name, row in zip(names, self.counts):
                w.writerow([name, *(int(c) for c in row)])
        return path


def confusion_matrix(true_labels, predicted_labels, num_classes: int, class_names=None) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    p = np.asarray(predicted_labels, dtype=np.int64).reshape(-1)
    if t.size != p.size:
        raise ShapeMismatch(f"{t.size} true labels vs {p.size} predictions")
    for arr in (t, p):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise InvalidLabel(f"labels must lie in [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts, list(class_names) if class_names else [])


@dataclass
class MetricsReport:
    accuracy: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    count: int
    class_names: list[str] = field(default_factory=list)
    averaging: str = "macro"

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class": {
                (self.class_names[i] if self.class_names else str(i)): {
                    "precision": self.precision[i],
                    "recall": self.recall[i],
                    "f1": self.f1[i],
                }
                for i in range(len(self.precision))
            },
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "count": self.count,
            "averaging": self.averaging,
        }

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    return np.divide(num, den, out=np.zeros(num.shape, dtype=np.float64), where=den > 0)


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Accuracy plus per-class and macro P/R/F1; zero denominators give 0."""
    c = cm.counts.astype(np.float64)
    total = c.sum()
    tp = np.diag(c)
    precision = _ratio(tp, c.sum(axis=0))
    recall = _ratio(tp, c.sum(axis=1))
    f1 = _ratio(2 * precision * recall, precision + recall)
    return MetricsReport(
        accuracy=float(tp.sum() / total) if total else 0.0,
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        macro_precision=float(precision.mean()) if len(tp) else 0.0,
        macro_recall=float(recall.mean()) if len(tp) else 0.0,
        macro_f1=float(f1.mean()) if len(tp) else 0.0,
        count=int(total),
        class_names=list(cm.class_names),
    )


def evaluate(model: Module, dataset: Dataset, split: str = "test", batch_size: int = 64):
    """(ConfusionMatrix, MetricsReport) of ``model`` on one split."""
    images, labels = dataset.split_arrays(split)
    preds = predict_logits(model, images, batch_size).argmax(axis=1) if len(labels) else labels
    cm = confusion_matrix(labels, preds, dataset.num_classes, dataset.manifest.class_names)
    return cm, metrics(cm)


# ---------------------------------------------------------------------------
# Grad-CAM
# ---------------------------------------------------------------------------


@dataclass
class Heatmap:
    values: np.ndarray  # [H, W] in [0, 1]
    target_class: int
    source: str = ""
    layer: str = ""


def default_target_layer(model: Module) -> str:
    return getattr(model, "gradcam_layer", "final_conv")


def grad_cam(model: Module, image, target_class: int, target_layer: str | None = None, source: str = "") -> Heatmap:
    """Channel weights = spatial mean of d logit / d A; map = ReLU(sum_k w_k A_k).

    The map is bilinearly upsampled to the image size and divided by its
    maximum (an all-zero map stays zero).
    """
    img = image.data if isinstance(image, Tensor) else np.asarray(image)
    if img.ndim == 3:
        img = img[None]
    if img.ndim != 4 or img.shape[0] != 1:
        raise ShapeMismatch(f"expected one [3,H,W] image, got {img.shape}")
    num_classes = getattr(getattr(model, "config", None), "num_classes", None)
    if num_classes is not None and not 0 <= target_class < num_classes:
        raise InvalidLabel(f"target class {target_class} outside [0, {num_classes})")
    layer = target_layer or default_target_layer(model)
    try:
        module = model.get_submodule(layer)
    except KeyError:
        raise InvalidTarget(f"model has no layer {layer!r}") from None

    module.tap = True
    try:
        model.zero_grad()
        logits = model(Tensor(img, dtype=next(iter(model.parameters())).dtype))
        acts = module.tapped
    finally:
        module.tap = False
        module.tapped = None
    if acts is None or acts.ndim != 4:
        raise InvalidTarget(f"layer {layer!r} output is not a spatial [B,C,H,W] map")
    if not 0 <= target_class < logits.shape[1]:
        raise InvalidLabel(f"target class {target_class} outside [0, {logits.shape[1]})")
    logits[:, target_class].sum().backward()
    grads = acts.grad if acts.grad is not None else np.zeros_like(acts.data)
    model.zero_grad()

    weights = grads[0].mean(axis=(1, 2))  # [C]
    cam = np.maximum(np.tensordot(weights, acts.data[0].astype(np.float64), axes=1), 0.0)
    H, W = img.shape[2:]
    cam = np.maximum(resize_bilinear(cam[None], H, W)[0], 0.0)
    peak = cam.max()
    cam = cam / peak if peak > 0 else np.zeros_like(cam)
    return Heatmap(cam, int(target_class), source, layer)


# ---------------------------------------------------------------------------
# overlays
# ---------------------------------------------------------------------------

# black -> red -> yellow -> white; every channel is non-decreasing in relevance
_HOT_STOPS = np.array([0.0, 1 / 3, 2 / 3, 1.0])
_HOT_COLORS = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [1, 1, 1]], dtype=np.float64)


def colormap(values: np.ndarray) -> np.ndarray:
    """Map [H, W] values in [0, 1] to [3, H, W] RGB."""
    v = np.clip(values, 0.0, 1.0)
    return np.stack([np.interp(v, _HOT_STOPS, _HOT_COLORS[:, c]) for c in range(3)])


def overlay_panels(heatmap: Heatmap, image: np.ndarray) -> np.ndarray:
    """[3, H, 2W]: original | colormapped heatmap blended 50/50 onto the grayscale original."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3 or img.shape[1:] != heatmap.values.shape:
        raise ShapeMismatch(f"image {img.shape} does not match heatmap {heatmap.values.shape}")
    img = np.clip(img, 0.0, 1.0)
    gray = (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2])[None]
    right = 0.5 * colormap(heatmap.values) + 0.5 * gray
    return np.concatenate([img, right], axis=2)


def render_overlay(heatmap: Heatmap, image: np.ndarray, out_path) -> Path:
    panels = overlay_panels(heatmap, image)
    path = Path(out_path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_ppm(panels))
    except OSError as exc:
        raise IoError(f"cannot write overlay {path}: {exc}") from exc
    return path
