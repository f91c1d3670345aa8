"""Slow, independent reference implementations used as test oracles.

Nothing here imports the package's geometry or metric code.
"""
from fractions import Fraction

import numpy as np


def raster_area(box):
    x1, y1, x2, y2 = (int(v) for v in box)
    return sum(1 for _ in range(x1, x2) for _ in range(y1, y2))


def raster_iou(a, b):
    """IOU of integer boxes by counting unit pixels, as an exact Fraction."""
    pa = {(x, y) for x in range(int(a[0]), int(a[2])) for y in range(int(a[1]), int(a[3]))}
    pb = {(x, y) for x in range(int(b[0]), int(b[2])) for y in range(int(b[1]), int(b[3]))}
    union = len(pa | pb)
    return Fraction(0) if union == 0 else Fraction(len(pa & pb), union)


def exact_iou(a, b):
    """Exact IOU for integer boxes via interval arithmetic (no rasterization)."""
    a = [Fraction(int(v)) for v in a]
    b = [Fraction(int(v)) for v in b]
    iw = max(Fraction(0), min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(Fraction(0), min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return Fraction(0) if union == 0 else inter / union


def brute_nms(boxes, scores, thresh):
    """Textbook greedy NMS over a Python list, IOU rounded once to float."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        if all(float(exact_iou(boxes[i], boxes[k])) <= thresh for k in keep):
            keep.append(i)
    return keep


def _match_prefix(dets, gts, k, thresh):
    """TP flags for the first k detections, matched from scratch."""
    used = set()
    flags = []
    for s, box, _ in dets[:k]:
        best, best_j = Fraction(-1), None
        for j, (gs, gbox) in enumerate(gts):
            if gs != s or j in used:
                continue
            ov = exact_iou(box, gbox)
            if ov > best:
                best, best_j = ov, j
        if best_j is not None and best >= thresh:
            used.add(best_j)
            flags.append(1)
        else:
            flags.append(0)
    return flags


def exhaustive_ap(dets, gts, thresh=Fraction(1, 2)):
    """All-points AP by enumerating every cutoff of the ranked list.

    ``dets``: list of (scene, int box, score) for one category;
    ``gts``: list of (scene, int box). Returns an exact Fraction.
    """
    ranked = sorted(enumerate(dets), key=lambda t: (-t[1][2], t[0]))
    ranked = [d for _, d in ranked]
    n_gt = len(gts)
    prec, rec = [], []
    for k in range(1, len(ranked) + 1):
        tp = sum(_match_prefix(ranked, gts, k, thresh))
        prec.append(Fraction(tp, k))
        rec.append(Fraction(tp, n_gt))
    ap = Fraction(0)
    prev = Fraction(0)
    for k in range(len(ranked)):
        if rec[k] > prev:
            ap += (rec[k] - prev) * max(prec[k:])
            prev = rec[k]
    return ap


def recount_fn(prob_mats, labels, thresh=0.5):
    """Per-scene FN counts by explicit loops over anchors and RPNs."""
    counts = []
    for F, lab in zip(prob_mats, labels):
        c = 0
        for i in range(F.shape[1]):
            if lab[i] != 1:
                continue
            col = list(F[:, i])
            cert = [min(f, 1 - f) for f in col]
            j = cert.index(min(cert))
            if col[j] < thresh:
                c += 1
        counts.append(c)
    return float(np.mean(counts)) if counts else 0.0


def sample_stats(x):
    """Mean, unbiased std and stderr by explicit sums."""
    n = len(x)
    m = sum(x) / n
    var = sum((v - m) ** 2 for v in x) / (n - 1)
    return m, var ** 0.5, (var / n) ** 0.5
