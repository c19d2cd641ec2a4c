"""Segmentation metrics: Dice, average symmetric surface distance, volumetric similarity."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ContractError, UndefinedMetricError


def _pair(pred, ref):
    pred = np.asarray(pred).astype(bool)
    ref = np.asarray(ref).astype(bool)
    if pred.shape != ref.shape:
        raise ContractError(f"mask shapes differ: {pred.shape} vs {ref.shape}")
    return pred, ref


def dsc(pred, ref) -> float:
    """2|A n B| / (|A| + |B|); 1.0 when both masks are empty."""
    pred, ref = _pair(pred, ref)
    total = int(pred.sum()) + int(ref.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, ref).sum()) / total


def vs(pred, ref) -> float:
    """1 - ||A| - |B|| / (|A| + |B|); 1.0 when both masks are empty."""
    pred, ref = _pair(pred, ref)
    a, b = int(pred.sum()), int(ref.sum())
    if a + b == 0:
        return 1.0
    return 1.0 - abs(a - b) / (a + b)


def surface(mask):
    """Foreground voxels with a background (or out-of-volume) face neighbour."""
    return kernels.boundary_mask(mask)


def asd(pred, ref, spacing=(1.0, 1.0, 1.0)) -> float:
    """Average symmetric surface distance in mm.

    Sum of nearest-boundary distances from each boundary voxel of one mask to
    the other mask's boundary, both directions, over the total boundary size.
    """
    pred, ref = _pair(pred, ref)
    if not pred.any() or not ref.any():
        raise UndefinedMetricError("ASD is undefined for an empty mask")
    b_pred, b_ref = surface(pred), surface(ref)
    d_to_ref = np.sqrt(kernels.edt_squared(b_ref, spacing)[b_pred])
    d_to_pred = np.sqrt(kernels.edt_squared(b_pred, spacing)[b_ref])
    n = d_to_ref.size + d_to_pred.size
    return float((d_to_ref.sum() + d_to_pred.sum()) / n)


@dataclass
class ClassMetrics:
    dsc: float
    asd_mm: float | None  # None when undefined
    vs: float


@dataclass
class MetricsReport:
    per_class: dict  # class name -> ClassMetrics
    class_names: tuple
    spacing: tuple = (1.0, 1.0, 1.0)
    macro: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "class_names": list(self.class_names),
            "spacing": list(self.spacing),
            "per_class": {k: vars(v).copy() for k, v in self.per_class.items()},
            "macro": dict(self.macro),
        }

    def rows(self, subject_id=""):
        """Flat rows (subject, class, dsc, asd_mm, vs) for CSV output."""
        return [
            {"subject": subject_id, "class": name, "dsc": m.dsc,
             "asd_mm": "" if m.asd_mm is None else m.asd_mm, "vs": m.vs}
            for name, m in self.per_class.items()
        ]


def report(pred_labels, ref_labels, spacing=(1.0, 1.0, 1.0), num_classes=None, class_names=None) -> MetricsReport:
    """One-vs-rest DSC/ASD/VS for every non-background class plus macro means.

    Macro ASD averages only the classes where it is defined and is None if
    none are.
    """
    pred = np.asarray(getattr(pred_labels, "labels", pred_labels))
    ref = np.asarray(getattr(ref_labels, "labels", ref_labels))
    if pred.shape != ref.shape:
        raise ContractError(f"label map shapes differ: {pred.shape} vs {ref.shape}")
    if num_classes is None:
        num_classes = getattr(ref_labels, "num_classes", int(max(pred.max(), ref.max())) + 1)
    if class_names is None:
        class_names = getattr(ref_labels, "class_names", None) or tuple(f"class{k}" for k in range(num_classes))
    if len(class_names) != num_classes:
        raise ContractError("class_names must name every class")
    if pred.max() >= num_classes or ref.max() >= num_classes:
        raise ContractError(f"labels exceed num_classes={num_classes}")
    per_class = {}
    for k in range(1, num_classes):
        p, r = pred == k, ref == k
        try:
            dist = asd(p, r, spacing)
        except UndefinedMetricError:
            dist = None
        per_class[class_names[k]] = ClassMetrics(dsc(p, r), dist, vs(p, r))
    values = list(per_class.values())
    defined = [m.asd_mm for m in values if m.asd_mm is not None]
    macro = {
        "dsc": float(np.mean([m.dsc for m in values])),
        "asd_mm": float(np.mean(defined)) if defined else None,
        "vs": float(np.mean([m.vs for m in values])),
    }
    return MetricsReport(per_class, tuple(class_names[1:]), tuple(float(s) for s in spacing), macro)

