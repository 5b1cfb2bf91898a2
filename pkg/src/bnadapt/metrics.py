"""Dice and Hausdorff evaluation for label maps."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import CLASS_NAMES

# foreground rows in report order: whole, enhanced, core
REPORT_CLASSES = (1, 3, 2)


def _check(pred: np.ndarray, truth: np.ndarray) -> None:
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {truth.shape}")


def dice(pred: np.ndarray, truth: np.ndarray, class_id: int) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    _check(pred, truth)
    p, t = pred == class_id, truth == class_id
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


def _directed(src: np.ndarray, dst: np.ndarray) -> float:
    # exact Euclidean distance from every pixel to the nearest dst pixel
    dist = ndimage.distance_transform_edt(~dst)
    return float(dist[src].max())


def hausdorff(pred: np.ndarray, truth: np.ndarray, class_id: int) -> float:
    """Symmetric Hausdorff distance in pixels between the class pixel sets.

    Both empty gives 0; exactly one empty gives the image diagonal.
    """
    pred, truth = np.asarray(pred), np.asarray(truth)
    _check(pred, truth)
    p, t = pred == class_id, truth == class_id
    pa, ta = p.any(), t.any()
    if not pa and not ta:
        return 0.0
    if not pa or not ta:
        return diagonal(pred.shape)
    return max(_directed(p, t), _directed(t, p))


def diagonal(shape) -> float:
    return math.hypot(*shape[:2])


@dataclass
class MetricTable:
    class_names: list[str]
    dice: np.ndarray  # (N, classes)
    hausdorff: np.ndarray  # (N, classes)

    def overall_dice(self) -> np.ndarray:
        return self.dice.mean(axis=1)

    def overall_hausdorff(self) -> np.ndarray:
        return self.hausdorff.mean(axis=1)

    @property
    def mean_dice(self) -> float:
        return float(self.overall_dice().mean())

    @property
    def mean_hausdorff(self) -> float:
        return float(self.overall_hausdorff().mean())

    def rows(self) -> list[tuple[str, float, float, float, float]]:
        out = []
        for j, name in enumerate(self.class_names):
            d, h = self.dice[:, j], self.hausdorff[:, j]
            out.append((name, float(d.mean()), float(d.std()), float(h.mean()), float(h.std())))
        od, oh = self.overall_dice(), self.overall_hausdorff()
        out.append(("Overall", float(od.mean()), float(od.std()), float(oh.mean()), float(oh.std())))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("class,dice,dice_std,hausdorff_px,hausdorff_px_std\n")
        for name, dm, ds, hm, hs in self.rows():
            buf.write(f"{name},{dm:.10f},{ds:.10f},{hm:.10f},{hs:.10f}\n")
        return buf.getvalue()


def score_maps(preds: np.ndarray, truths: np.ndarray, classes=REPORT_CLASSES) -> MetricTable:
    if len(preds) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    _check(preds, truths)
    d = np.array([[dice(p, t, c) for c in classes] for p, t in zip(preds, truths)])
    h = np.array([[hausdorff(p, t, c) for c in classes] for p, t in zip(preds, truths)])
    return MetricTable([CLASS_NAMES[c] for c in classes], d, h)


def evaluate(model, images: np.ndarray, labels: np.ndarray, batch_size: int = 16) -> MetricTable:
    """Eval-mode inference over a dataset, scored per foreground class."""
    if len(images) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    return score_maps(model.predict(images, batch_size), labels)
