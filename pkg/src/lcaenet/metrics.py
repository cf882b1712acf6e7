"""Pixel IoU, target-level detection probability (Pd), false-alarm rate (Fa) and ROC points."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import DimensionError

CENTROID_TOLERANCE = 3.0
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class Component:
    pixels: tuple  # ((row, col), ...) in raster order
    centroid: tuple
    area: int


def connected_components(mask: np.ndarray) -> list[Component]:
    """8-connected foreground components, ordered by (min row, min col)."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DimensionError(f"expected a 2-D mask, got shape {mask.shape}")
    labels, n = ndimage.label(mask > 0, structure=_EIGHT)
    if n == 0:
        return []
    rows, cols = np.nonzero(labels)
    ids = labels[rows, cols]
    order = np.argsort(ids, kind="stable")
    rows, cols, ids = rows[order], cols[order], ids[order]
    splits = np.flatnonzero(np.diff(ids)) + 1
    comps = []
    for r, c in zip(np.split(rows, splits), np.split(cols, splits)):
        pix = tuple(zip(r.tolist(), c.tolist()))
        comps.append(Component(pixels=pix, centroid=(float(r.mean()), float(c.mean())), area=len(pix)))
    comps.sort(key=lambda comp: comp.pixels[0])
    return comps


def _pairs(preds, gts) -> list[tuple[np.ndarray, np.ndarray]]:
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise DimensionError(f"{len(preds)} predictions for {len(gts)} ground truths")
    if not preds:
        raise ValueError("empty dataset")
    out = []
    for p, g in zip(preds, gts):
        p, g = np.asarray(p) > 0, np.asarray(g) > 0
        if p.shape != g.shape:
            raise DimensionError(f"prediction shape {p.shape} != ground-truth shape {g.shape}")
        out.append((p, g))
    return out


def match_targets(pred_comps: Sequence[Component], gt_comps: Sequence[Component],
                  tolerance: float = CENTROID_TOLERANCE) -> list[tuple[int, int]]:
    """One-to-one (gt index, pred index) matches with centroid distance < tolerance.

    Greedy by ascending distance; ties break on (gt index, pred index).
    """
    candidates = []
    for i, g in enumerate(gt_comps):
        for j, p in enumerate(pred_comps):
            dist = math.hypot(g.centroid[0] - p.centroid[0], g.centroid[1] - p.centroid[1])
            if dist < tolerance:
                candidates.append((dist, i, j))
    candidates.sort()
    used_gt, used_pred, matches = set(), set(), []
    for _, i, j in candidates:
        if i in used_gt or j in used_pred:
            continue
        used_gt.add(i)
        used_pred.add(j)
        matches.append((i, j))
    return matches


@dataclass(frozen=True)
class EvalReport:
    iou: float
    pd: float
    fa: float
    tp_pixels: int
    gt_pixels: int
    pred_pixels: int
    detected_targets: int
    total_targets: int
    false_pixels: int
    total_pixels: int

    COLUMNS = ("iou", "pd", "fa_e6", "tp_pixels", "gt_pixels", "pred_pixels",
               "detected_targets", "total_targets", "false_pixels", "total_pixels")

    @property
    def fa_e6(self) -> float:
        """False-alarm rate in units of 1e-6."""
        return self.fa * 1e6

    def to_row(self, sep: str = "\t") -> str:
        vals = [f"{self.iou:.6f}", f"{self.pd:.6f}", f"{self.fa_e6:.4f}"]
        vals += [str(getattr(self, c)) for c in self.COLUMNS[3:]]
        return sep.join(vals)

    @classmethod
    def header(cls, sep: str = "\t") -> str:
        return sep.join(cls.COLUMNS)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fa_e6"] = self.fa_e6
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(preds, gts, tolerance: float = CENTROID_TOLERANCE, allow_no_targets: bool = False) -> EvalReport:
    """All three metrics from one pass over paired binary masks.

    IoU is micro-averaged (counts summed over the dataset before dividing).
    ``pd`` is NaN when the dataset has no targets and ``allow_no_targets`` is
    set; otherwise that case raises.
    """
    tp = t = p = detected = total = false = pixels = 0
    for pm, gm in _pairs(preds, gts):
        inter = int(np.count_nonzero(pm & gm))
        tp += inter
        t += int(np.count_nonzero(gm))
        p += int(np.count_nonzero(pm))
        false += int(np.count_nonzero(pm & ~gm))
        pixels += pm.size
        gt_comps = connected_components(gm)
        total += len(gt_comps)
        if gt_comps:
            detected += len(match_targets(connected_components(pm), gt_comps, tolerance))
    union = t + p - tp
    if total == 0 and not allow_no_targets:
        raise ValueError("no ground-truth targets in dataset; Pd is undefined")
    return EvalReport(
        iou=tp / union if union else 1.0,
        pd=detected / total if total else float("nan"),
        fa=false / pixels,
        tp_pixels=tp, gt_pixels=t, pred_pixels=p,
        detected_targets=detected, total_targets=total,
        false_pixels=false, total_pixels=pixels,
    )


def iou(preds, gts) -> float:
    """Dataset IoU: sum of intersections over sum of unions."""
    tp = union = 0
    for pm, gm in _pairs(preds, gts):
        inter = int(np.count_nonzero(pm & gm))
        tp += inter
        union += int(np.count_nonzero(pm)) + int(np.count_nonzero(gm)) - inter
    return tp / union if union else 1.0


def iou_per_image(preds, gts) -> float:
    """Mean of per-image IoUs (images with an empty union count as 1)."""
    vals = []
    for pm, gm in _pairs(preds, gts):
        union = np.count_nonzero(pm | gm)
        vals.append(np.count_nonzero(pm & gm) / union if union else 1.0)
    return float(np.mean(vals))


def pd(preds, gts, tolerance: float = CENTROID_TOLERANCE) -> float:
    """Fraction of ground-truth targets matched by a predicted component."""
    detected = total = 0
    for pm, gm in _pairs(preds, gts):
        gt_comps = connected_components(gm)
        total += len(gt_comps)
        if gt_comps:
            detected += len(match_targets(connected_components(pm), gt_comps, tolerance))
    if total == 0:
        raise ValueError("no ground-truth targets in dataset; Pd is undefined")
    return detected / total


def fa(preds, gts) -> float:
    """False-positive pixels over all pixels."""
    false = pixels = 0
    for pm, gm in _pairs(preds, gts):
        false += int(np.count_nonzero(pm & ~gm))
        pixels += pm.size
    return false / pixels


def roc(prob_maps, gts, thresholds: Sequence[float]) -> list[tuple[float, float]]:
    """``(Fa, Pd)`` for each threshold, binarising at ``prob > threshold``."""
    probs = [np.asarray(pm, dtype=np.float64) for pm in prob_maps]
    gts = [np.asarray(g) > 0 for g in gts]
    gt_comps = [connected_components(g) for g in gts]
    total = sum(len(c) for c in gt_comps)
    if total == 0:
        raise ValueError("no ground-truth targets in dataset; Pd is undefined")
    points = []
    for tau in thresholds:
        if not 0.0 <= tau <= 1.0:
            raise ValueError(f"threshold {tau} outside [0, 1]")
        detected = false = pixels = 0
        for prob, g, comps in zip(probs, gts, gt_comps):
            pm = prob > tau
            false += int(np.count_nonzero(pm & ~g))
            pixels += pm.size
            if comps and pm.any():
                detected += len(match_targets(connected_components(pm), comps))
        points.append((false / pixels, detected / total))
    return points


def default_thresholds(n: int = 21) -> list[float]:
    """Evenly spaced thresholds from 1 down to 0."""
    return [float(v) for v in np.linspace(1.0, 0.0, n)]


def format_roc(points: Sequence[tuple[float, float]]) -> str:
    """Two tab-separated columns, ``fa`` and ``pd``, one row per threshold."""
    lines = ["fa\tpd"] + [f"{f:.9g}\t{p:.9g}" for f, p in points]
    return "\n".join(lines) + "\n"
