"""Instance matching and precision metrics for segmentation (Table III shape).

Precision here is the set-level TP/(TP+FP) after greedy score-ordered
matching at an IoU threshold — not a PR-curve AP. AUPC integrates that
precision over thresholds 0.50..0.95 with the trapezoid rule, unnormalized
(flat precision p gives 0.45*p).
"""
import json
from dataclasses import dataclass, field

import numpy as np

IOU_GRID = [round(0.50 + 0.05 * i, 2) for i in range(10)]   # 0.50 .. 0.95


class UndefinedPrecision(ValueError):
    """TP + FP = 0: no predictions were made, Eq. TP/(TP+FP) is 0/0."""


def iou(a, b):
    """Intersection over union of two same-shape boolean masks."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        raise ValueError("IoU of two empty masks is undefined")
    return float(np.logical_and(a, b).sum() / union)


def match_instances(preds, gts, k):
    """Greedy matching in descending score order.

    Each prediction takes the still-unmatched ground truth with the highest
    IoU; it is a TP if that IoU reaches k, else an FP (and the ground truth
    stays available). Returns (tp, fp, matches) where matches is a list of
    (pred_index, gt_index or None, iou) in score order.
    """
    if not 0.0 < k < 1.0:
        raise ValueError("IoU threshold must be in (0, 1)")
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    taken = [False] * len(gts)
    tp = fp = 0
    matches = []
    for i in order:
        best_j, best_iou = None, 0.0
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            v = iou(preds[i].mask, gt)
            if v > best_iou:
                best_j, best_iou = j, v
        if best_j is not None and best_iou >= k:
            taken[best_j] = True
            tp += 1
            matches.append((i, best_j, best_iou))
        else:
            fp += 1
            matches.append((i, None, best_iou))
    return tp, fp, matches


def ap_at(preds, gts, k):
    """Set-level precision TP/(TP+FP) at IoU threshold k (one image)."""
    tp, fp, _ = match_instances(preds, gts, k)
    if tp + fp == 0:
        raise UndefinedPrecision("no predictions: precision is 0/0")
    return tp / (tp + fp)


def ap_range(preds, gts):
    """(AP_50, AP_75, AP_90, AP_50:95) for one image's instances."""
    ap50 = ap_at(preds, gts, 0.50)
    ap75 = ap_at(preds, gts, 0.75)
    ap90 = ap_at(preds, gts, 0.90)
    mean_aps = float(np.mean([ap_at(preds, gts, k) for k in IOU_GRID]))
    return ap50, ap75, ap90, mean_aps


def aupc(preds, gts):
    """Trapezoidal area under precision vs IoU threshold, range [0.50, 0.95]."""
    values = [ap_at(preds, gts, k) for k in IOU_GRID]
    return float(np.trapezoid(values, dx=0.05))


# ---------------------------------------------------------------------------
# dataset-level pooling (Table III rows)

def pooled_precision(per_image, k):
    """TP/(TP+FP) pooled over a test set.

    per_image: list of (preds, gts) pairs, one per test image; matching
    stays within each image. Raises UndefinedPrecision if no image produced
    any prediction.
    """
    tp = fp = 0
    for preds, gts in per_image:
        t, f, _ = match_instances(preds, gts, k)
        tp += t
        fp += f
    if tp + fp == 0:
        raise UndefinedPrecision("no predictions over the whole test set")
    return tp / (tp + fp)


@dataclass
class EvalRow:
    name: str
    ap_50: float
    ap_75: float
    ap_90: float
    ap_50_95: float
    avg: float
    aupc: float
    undefined_ap: bool = False   # precision was 0/0 and recorded as 0.0


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    CSV_HEADER = "training_dataset,ap_50,ap_75,ap_90,ap_50_95,avg_50_75_90,aupc"

    def to_csv(self, path):
        lines = [self.CSV_HEADER]
        for r in self.rows:
            lines.append(",".join([r.name] + [repr(v) for v in (
                r.ap_50, r.ap_75, r.ap_90, r.ap_50_95, r.avg, r.aupc)]))
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")

    @staticmethod
    def from_csv(path):
        with open(path) as f:
            lines = [ln.strip() for ln in f if ln.strip()]
        if lines[0] != EvalReport.CSV_HEADER:
            raise ValueError(f"unexpected header: {lines[0]}")
        rows = []
        for ln in lines[1:]:
            parts = ln.split(",")
            vals = [float(v) for v in parts[1:]]
            rows.append(EvalRow(parts[0], *vals))
        return EvalReport(rows=rows)


def evaluate_combination(name, per_image):
    """Build one Table III row from per-image (preds, gts) pairs.

    Undefined precision (a model that predicts nothing anywhere) is
    recorded as 0.0 across the board with the undefined_ap flag set.
    """
    try:
        precisions = {k: pooled_precision(per_image, k) for k in IOU_GRID}
    except UndefinedPrecision:
        return EvalRow(name=name, ap_50=0.0, ap_75=0.0, ap_90=0.0,
                       ap_50_95=0.0, avg=0.0, aupc=0.0, undefined_ap=True)
    ap50 = precisions[0.50]
    ap75 = precisions[0.75]
    ap90 = precisions[0.90]
    ap5095 = float(np.mean([precisions[k] for k in IOU_GRID]))
    avg = float(np.mean([ap50, ap75, ap90]))
    area = float(np.trapezoid([precisions[k] for k in IOU_GRID], dx=0.05))
    return EvalRow(name=name, ap_50=ap50, ap_75=ap75, ap_90=ap90,
                   ap_50_95=ap5095, avg=avg, aupc=area)


def precision_curve(per_image):
    """[(k, precision)] over the IoU grid; undefined recorded as 0.0."""
    out = []
    for k in IOU_GRID:
        try:
            out.append((k, pooled_precision(per_image, k)))
        except UndefinedPrecision:
            out.append((k, 0.0))
    return out


def write_match_details(path, name, per_image, k=0.50):
    """One JSON line per test image with the match decisions at one k."""
    with open(path, "w") as f:
        for img_idx, (preds, gts) in enumerate(per_image):
            tp, fp, matches = match_instances(preds, gts, k)
            rec = {"combination": name, "image": img_idx, "k": k,
                   "tp": tp, "fp": fp, "n_gt": len(gts),
                   "matches": [
                       {"pred": int(i), "gt": (int(j) if j is not None else None),
                        "iou": round(float(v), 6)}
                       for i, j, v in matches]}
            f.write(json.dumps(rec) + "\n")
