"""Random instance generators shared by the unit and acceptance suites."""
import numpy as np


def int_box(rng, size=12):
    x = np.sort(rng.integers(0, size + 1, size=2))
    y = np.sort(rng.integers(0, size + 1, size=2))
    return (int(x[0]), int(y[0]), int(x[1]), int(y[1]))


def nms_case(rng, max_boxes=8):
    n = int(rng.integers(0, max_boxes + 1))
    boxes = [int_box(rng) for _ in range(n)]
    # a coarse score grid makes ties common
    scores = [float(s) for s in rng.choice([0.1, 0.4, 0.5, 0.9], size=n)]
    thresh = float(rng.choice([0.3, 0.5, 0.7]))
    return boxes, scores, thresh


def ap_case(rng, max_boxes=10, n_scenes=3, n_cats=2):
    """Scenes of integer gt boxes and jittered detections, at most ``max_boxes`` of each.

    Returns ``(detections, gt)`` in the ap50 layout: per scene a list of
    ``(box, score, category)`` and a list of ``(category, box)``.
    """
    n_gt = int(rng.integers(1, max_boxes + 1))
    n_det = int(rng.integers(0, max_boxes + 1))
    gt = [[] for _ in range(n_scenes)]
    flat_gt = []
    for _ in range(n_gt):
        s = int(rng.integers(n_scenes))
        c = int(rng.integers(n_cats))
        b = int_box(rng, 10)
        gt[s].append((c, b))
        flat_gt.append((s, c, b))
    dets = [[] for _ in range(n_scenes)]
    for _ in range(n_det):
        if flat_gt and rng.random() < 0.7:
            s, c, b = flat_gt[int(rng.integers(len(flat_gt)))]
            d = rng.integers(-2, 3, size=4)
            x1, y1 = min(b[0] + d[0], b[2] + d[2]), min(b[1] + d[1], b[3] + d[3])
            x2, y2 = max(b[0] + d[0], b[2] + d[2]), max(b[1] + d[1], b[3] + d[3])
            box = (int(x1), int(y1), int(x2), int(y2))
            if rng.random() < 0.15:
                c = int(rng.integers(n_cats))
        else:
            s, c, box = int(rng.integers(n_scenes)), int(rng.integers(n_cats)), int_box(rng, 10)
        score = float(rng.choice([0.2, 0.5, 0.8, 0.9])) if rng.random() < 0.5 else float(rng.random())
        dets[s].append((box, score, c))
    return dets, gt


def oracle_layout(dets, gt, category):
    """Flatten to the exhaustive oracle's per-category layout, keeping input order."""
    od = [(s, b, score) for s, ds in enumerate(dets) for b, score, c in ds if c == category]
    og = [(s, b) for s, gs in enumerate(gt) for c, b in gs if c == category]
    return od, og
