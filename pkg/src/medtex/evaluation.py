"""Evaluation: post-hoc fidelity vs. the teacher, IoU against lesion masks,
a random-selection calibration floor, and heatmap export.

IoU comes in two variants: ``standard`` is intersection over union; the
``paper_eq13`` variant doubles it (a perfect match scores 2.0), provided for
parity with the published tables.  Comparing a (C, H, W) selection against
an (H, W) mask needs a channel reduction; by default a pixel counts as
selected when *any* of its channel entries is selected.
"""

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ValidationError
from .explainer import SelectionMap, topk_mask

VARIANTS = ("standard", "paper_eq13")


@dataclass(frozen=True)
class PostHocReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    n_samples: int
    positive_class: int = 1

    def to_kv(self):
        return (f"accuracy = {self.accuracy:.6f}\n"
                f"precision = {self.precision:.6f}\n"
                f"recall = {self.recall:.6f}\n"
                f"f1 = {self.f1:.6f}\n"
                f"n_samples = {self.n_samples}\n"
                f"positive_class = {self.positive_class}\n")


@dataclass
class IoUReport:
    variant: str
    k_grid: list
    per_k: list                    # mean IoU per grid entry, over masked images
    lesion_size_iou: float = None  # mean IoU at per-image K = |lesion|
    n_images: int = 0

    def to_kv(self):
        lines = [f"variant = {self.variant}", f"n_images = {self.n_images}"]
        for k, v in zip(self.k_grid, self.per_k):
            lines.append(f"iou_top{k} = {v:.6f}")
        if self.lesion_size_iou is not None:
            lines.append(f"iou_lesion_size = {self.lesion_size_iou:.6f}")
        return "\n".join(lines) + "\n"


def confusion_metrics(reference, predicted, positive_class=1):
    """Accuracy and positive-class precision/recall/F1 as plain floats."""
    ref = np.asarray(reference)
    pred = np.asarray(predicted)
    if ref.shape != pred.shape or ref.size == 0:
        raise ValidationError("eval", "confusion_metrics",
                              f"bad label arrays: {ref.shape} vs {pred.shape}")
    tp = int(np.sum((pred == positive_class) & (ref == positive_class)))
    fp = int(np.sum((pred == positive_class) & (ref != positive_class)))
    fn = int(np.sum((pred != positive_class) & (ref == positive_class)))
    accuracy = float(np.mean(pred == ref))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"accuracy": accuracy, "precision": precision, "recall": recall, "f1": f1}


def _predict_fn(model_or_fn):
    if hasattr(model_or_fn, "predict"):
        return model_or_fn.predict
    if callable(model_or_fn):
        return model_or_fn
    raise ValidationError("eval", "posthoc_metrics",
                          f"cannot predict with {type(model_or_fn).__name__}")


def posthoc_metrics(student_pipeline, teacher, test_set, positive_class=1):
    """Fidelity of student predictions measured against teacher argmax labels.

    Argmax ties break toward the lower class index.  Precision/recall/F1 are
    for the abnormal class.
    """
    if len(test_set) == 0:
        raise ValidationError("eval", "posthoc_metrics", "empty test set")
    images = test_set.images()
    ref = _predict_fn(teacher)(images).argmax(axis=1)
    pred = _predict_fn(student_pipeline)(images).argmax(axis=1)
    m = confusion_metrics(ref, pred, positive_class)
    return PostHocReport(accuracy=m["accuracy"], precision=m["precision"],
                         recall=m["recall"], f1=m["f1"], n_samples=len(images),
                         positive_class=positive_class)


# ---------------------------------------------------------------------------
# IoU

def _as_selection_array(selection):
    if isinstance(selection, SelectionMap):
        return selection.values
    arr = np.asarray(selection)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValidationError("eval", "iou_topk",
                              f"selection must be (C, H, W), got {arr.shape}")
    return arr


def _spatial_selected(selection, k, reduction):
    sel = topk_mask(_as_selection_array(selection), k).values
    if reduction == "any":
        return sel.any(axis=0)
    if reduction == "all":
        return sel.all(axis=0)
    raise ValidationError("eval", "iou_topk", f"unknown channel reduction {reduction!r}")


def _iou_value(inter, union, variant):
    if variant not in VARIANTS:
        raise ValidationError("eval", "iou_topk", f"variant must be one of {VARIANTS}")
    if union == 0:
        warnings.warn("IoU with empty union; returning 0", RuntimeWarning)
        return 0.0
    base = inter / union
    return 2.0 * base if variant == "paper_eq13" else base


def iou_topk(selection, lesion_mask, k, variant="standard", reduction="any"):
    """Overlap between the top-k selected pixels and a binary lesion mask."""
    mask = np.asarray(lesion_mask).astype(bool)
    if mask.ndim != 2:
        raise ValidationError("eval", "iou_topk",
                              f"lesion mask must be (H, W), got {mask.shape}")
    chosen = _spatial_selected(selection, k, reduction)
    if chosen.shape != mask.shape:
        raise ValidationError("eval", "iou_topk",
                              f"selection spatial {chosen.shape} != mask {mask.shape}")
    inter = int(np.sum(chosen & mask))
    union = int(np.sum(chosen | mask))
    return _iou_value(inter, union, variant)


def default_k_grid(h, w):
    """Six selection budgets scaling with resolution (k * H/8 * W/8)."""
    unit = (h // 8) * (w // 8)
    return [k * unit for k in range(1, 7)]


def _selection_fn(source):
    if hasattr(source, "selection_map"):
        return source.selection_map
    if callable(source):
        return source
    raise ValidationError("eval", "iou_curve",
                          f"cannot derive selections from {type(source).__name__}")


def _masked_samples(test_set):
    samples = [s for s in test_set.samples if s.label == 1 and s.lesion_mask.any()]
    if not samples:
        raise ValidationError("eval", "iou_curve", "no masked abnormal images in test set")
    return samples


def iou_curve(selection_source, test_set, k_grid=None, variant="standard",
              reduction="any"):
    """Mean IoU at each top-K budget over the masked abnormal test images."""
    samples = _masked_samples(test_set)
    h, w = samples[0].lesion_mask.shape
    grid = list(k_grid) if k_grid is not None else default_k_grid(h, w)
    fn = _selection_fn(selection_source)
    sums = np.zeros(len(grid))
    for s in samples:
        sel = fn(s.image)
        for i, k in enumerate(grid):
            sums[i] += iou_topk(sel, s.lesion_mask, k, variant, reduction)
    per_k = [float(v / len(samples)) for v in sums]
    return IoUReport(variant=variant, k_grid=grid, per_k=per_k, n_images=len(samples))


def iou_at_lesion_size(selection_source, test_set, variant="standard", reduction="any"):
    """Mean per-image IoU with K set to that image's lesion pixel count."""
    samples = _masked_samples(test_set)
    fn = _selection_fn(selection_source)
    total = 0.0
    for s in samples:
        k = int(s.lesion_mask.astype(bool).sum())
        total += iou_topk(fn(s.image), s.lesion_mask, k, variant, reduction)
    return total / len(samples)


def random_selection_baseline(test_set, k_grid=None, seed=0, n_draws=20,
                              variant="standard"):
    """IoU of uniformly random spatial pixel selections (calibration floor).

    Each masked image is scored with ``n_draws`` independent selections per
    budget; deterministic given the seed.  The report also carries the
    random lesion-size IoU.
    """
    if n_draws < 1:
        raise ValidationError("eval", "random_selection_baseline", "n_draws must be >= 1")
    samples = _masked_samples(test_set)
    h, w = samples[0].lesion_mask.shape
    grid = list(k_grid) if k_grid is not None else default_k_grid(h, w)
    sums = np.zeros(len(grid))
    lesion_sum = 0.0
    for si, s in enumerate(samples):
        mask = s.lesion_mask.astype(bool)
        m = int(mask.sum())
        for d in range(n_draws):
            rng = np.random.default_rng(np.random.SeedSequence((int(seed), si, d)))
            for i, k in enumerate(grid):
                pick = rng.choice(h * w, size=min(k, h * w), replace=False)
                chosen = np.zeros(h * w, dtype=bool)
                chosen[pick] = True
                chosen = chosen.reshape(h, w)
                inter = int(np.sum(chosen & mask))
                union = int(np.sum(chosen | mask))
                sums[i] += _iou_value(inter, union, variant)
            pick = rng.choice(h * w, size=min(m, h * w), replace=False)
            chosen = np.zeros(h * w, dtype=bool)
            chosen[pick] = True
            chosen = chosen.reshape(h, w)
            inter = int(np.sum(chosen & mask))
            union = int(np.sum(chosen | mask))
            lesion_sum += _iou_value(inter, union, variant)
    denom = len(samples) * n_draws
    return IoUReport(variant=variant, k_grid=grid,
                     per_k=[float(v / denom) for v in sums],
                     lesion_size_iou=float(lesion_sum / denom),
                     n_images=len(samples))


# ---------------------------------------------------------------------------
# heatmaps

def _hot_ramp(t):
    """Map [0,1] scores to an RGB ramp (dark -> red -> yellow -> white)."""
    r = np.clip(3.0 * t, 0.0, 1.0)
    g = np.clip(3.0 * t - 1.0, 0.0, 1.0)
    b = np.clip(3.0 * t - 2.0, 0.0, 1.0)
    return np.stack([r, g, b])


def export_heatmap(selection, image, path):
    """Write a grayscale score map and a colored overlay PNG.

    ``path`` is used as a stem: ``<path>_theta.png`` holds the channel-max
    selection scores, ``<path>_overlay.png`` blends them onto the image.
    Output bytes are deterministic for fixed inputs.
    """
    theta = _as_selection_array(selection)
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[1:] != theta.shape[1:]:
        raise ValidationError("eval", "export_heatmap",
                              f"image {img.shape} does not match selection {theta.shape}")
    smax = theta.max(axis=0)
    stem = Path(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    gray_path = stem.with_name(stem.name + "_theta.png")
    over_path = stem.with_name(stem.name + "_overlay.png")
    gray = np.clip(np.rint(smax * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(gray, mode="L").save(gray_path)
    blend = 0.45 * img + 0.55 * _hot_ramp(smax)
    over = np.clip(np.rint(blend * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(over.transpose(1, 2, 0), mode="RGB").save(over_path)
    return gray_path, over_path
