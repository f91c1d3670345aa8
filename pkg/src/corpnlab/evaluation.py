"""Proposal-neglect counts, proposal recall and VOC-style AP50."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from . import corpn, linalg
from .geometry import AnchorLabel, as_boxes, nms, pairwise_iou
from .simworld import Episode, World, stream
from .train import DetectorState, SceneCache, TrainConfig, propose, sample_anchors

_HELDOUT = 200


@dataclass
class MetricsRecord:
    novel_ap50: float
    base_ap50: float
    avg_fn: float
    avg_fg: float
    proposal_recall: float
    logdet_cov: float

    def as_dict(self) -> dict:
        return asdict(self)


def _probs(out) -> np.ndarray:
    return out.probs if isinstance(out, corpn.ForwardOutput) else np.atleast_2d(np.asarray(out, dtype=float))


def avg_false_negatives(outputs: Sequence, labels: Sequence, thresh: float = 0.5) -> float:
    """Mean per scene of foreground anchors whose most-certain score is below ``thresh``.

    ``outputs`` holds one ForwardOutput (or ``N x N_A`` probability matrix)
    per scene, ``labels`` the matching anchor labels.
    """
    if len(outputs) != len(labels):
        raise ValueError("need one label vector per scene")
    if not outputs:
        return 0.0
    counts = []
    for out, lab in zip(outputs, labels):
        scores, _ = corpn.score_boxes(_probs(out))
        fg = np.asarray(lab) == AnchorLabel.FOREGROUND
        counts.append(int(np.sum(scores[fg] < thresh)))
    return float(np.mean(counts))


def avg_foreground_after_nms(proposals: Sequence) -> float:
    """Mean per scene of NMS survivors that score_box calls foreground.

    Each entry is the boolean foreground flag vector of one scene's kept boxes.
    """
    if len(proposals) == 0:
        return 0.0
    return float(np.mean([int(np.sum(np.asarray(p, dtype=bool))) for p in proposals]))


def recall_hits(proposals, gt, iou_thresh: float = 0.5, top_k: int = 10) -> tuple[int, int]:
    """(matched gt count, gt count) for one scene with proposals in rank order."""
    gt = as_boxes(gt)
    props = as_boxes(proposals)[:top_k]
    if len(gt) == 0:
        return 0, 0
    if len(props) == 0:
        return 0, len(gt)
    return int(np.sum(pairwise_iou(gt, props).max(axis=1) >= iou_thresh)), len(gt)


def proposal_recall(proposals: Sequence, gt: Sequence, iou_thresh: float = 0.5, top_k: int = 10) -> float:
    """Fraction of gt boxes (over all scenes) hit by one of their scene's top_k proposals.

    Both arguments are per-scene lists. No gt at all gives 1.0.
    """
    hit = total = 0
    for p, g in zip(proposals, gt, strict=True):
        h, t = recall_hits(p, g, iou_thresh, top_k)
        hit += h
        total += t
    return 1.0 if total == 0 else hit / total


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-points interpolated AP from a TP/FP indicator in descending-score order."""
    tp = np.asarray(tp, dtype=float)
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def ap50(detections: Sequence[Iterable], gt: Sequence[Iterable], iou_thresh: float = 0.5,
         categories: Iterable[int] | None = None) -> tuple[dict, float]:
    """VOC-style AP per category and their mean.

    ``detections[s]`` is an iterable of ``(box, score, category)`` for scene
    ``s``; ``gt[s]`` an iterable of ``(category, box)``. Detections are
    visited in descending score (stable in input order) and each claims the
    highest-IOU still-unmatched gt of its category with IOU >= ``iou_thresh``.
    Categories without gt are left out.
    """
    gt_by = defaultdict(list)  # category -> [(scene, box)]
    for s, objs in enumerate(gt):
        for c, b in objs:
            gt_by[int(c)].append((s, as_boxes(b)[0]))
    det_by = defaultdict(list)
    order = 0
    for s, dets in enumerate(detections):
        for b, score, c in dets:
            det_by[int(c)].append((-float(score), order, s, as_boxes(b)[0]))
            order += 1
    cats = sorted(gt_by) if categories is None else [int(c) for c in categories if int(c) in gt_by]
    per_cat = {}
    for c in cats:
        scene_gt = defaultdict(list)
        for s, b in gt_by[c]:
            scene_gt[s].append(b)
        scene_gt = {s: np.array(v) for s, v in scene_gt.items()}
        used = {s: np.zeros(len(v), dtype=bool) for s, v in scene_gt.items()}
        dets = sorted(det_by.get(c, []), key=lambda t: (t[0], t[1]))
        tp = np.zeros(len(dets))
        for k, (_, _, s, b) in enumerate(dets):
            if s not in scene_gt:
                continue
            ov = pairwise_iou(b, scene_gt[s])[0]
            ov[used[s]] = -1.0
            j = int(np.argmax(ov))
            if ov[j] >= iou_thresh:
                used[s][j] = True
                tp[k] = 1.0
        per_cat[c] = average_precision(tp, len(gt_by[c]))
    mean = float(np.mean(list(per_cat.values()))) if per_cat else float("nan")
    return per_cat, mean


# ----------------------------------------------------------------------------
# full evaluation of a trained detector


def detect(world: World, state: DetectorState, data, cfg: TrainConfig, score_thresh: float = 0.05,
           class_nms: float = 0.5):
    """Run the detector on one scene: proposals, then per-class scored boxes."""
    idx, scores, is_fg = propose(world, state.rpn_probs(data.X), cfg)
    probs = state.classifier.predict_proba(state.box_features(data.X[:, idx]))
    boxes = world.anchors[idx]
    dets = []
    for row, c in enumerate(state.classifier.categories, start=1):
        p = probs[row]
        sel = np.flatnonzero(p >= score_thresh)
        if sel.size == 0:
            continue
        keep = nms(boxes[sel], p[sel], class_nms)
        dets.extend((boxes[sel[k]], float(p[sel[k]]), c) for k in keep)
    return idx, is_fg, dets


def heldout_logdet(world: World, episode: Episode, state: DetectorState, cfg: TrainConfig,
                   ridge: float, cache: SceneCache | None = None) -> float:
    """log det of the RPN probability covariance over a fixed held-out anchor batch."""
    cache = cache or SceneCache(world, cfg)
    rng = stream(world.seed, _HELDOUT)
    cols = []
    for scene in episode.test[:max(cfg.batch_scenes, 1)]:
        data = cache(scene)
        a = sample_anchors(rng, data.labels, cfg.anchors_per_scene, cfg.fg_fraction)
        cols.append(data.X[:, a])
    F = state.rpn_probs(np.hstack(cols))
    return linalg.logdet_psd(linalg.covariance(F), ridge)


def evaluate(world: World, episode: Episode, state: DetectorState, cfg: TrainConfig,
             mode: str | None = None, ridge: float = 1e-6, top_k: int = 10,
             fn_thresh: float = 0.5) -> MetricsRecord:
    """Metrics of a fine-tuned detector.

    Avg#FN / Avg#FG come from the support scenes used in fine-tuning (the
    RPNs are frozen there); recall and AP come from the test scenes.
    """
    mode = mode or cfg.phase2_mode
    cache = SceneCache(world, cfg)
    outs, labels, fg_flags = [], [], []
    for scene in episode.support(mode):
        data = cache(scene)
        probs = state.rpn_probs(data.X)
        outs.append(probs)
        labels.append(data.labels)
        _, _, is_fg = propose(world, probs, cfg)
        fg_flags.append(is_fg)

    novel = set(episode.split.novel_classes)
    props, novel_gt, dets, gts = [], [], [], []
    for scene in episode.test:
        data = cache(scene)
        idx, _, d = detect(world, state, data, cfg)
        props.append(world.anchors[idx])
        novel_gt.append([b for c, b in scene.objects if c in novel])
        dets.append(d)
        gts.append(scene.objects)
    _, novel_ap = ap50(dets, gts, categories=episode.split.novel_classes)
    _, base_ap = ap50(dets, gts, categories=episode.split.base_classes)
    return MetricsRecord(
        novel_ap50=novel_ap,
        base_ap50=base_ap,
        avg_fn=avg_false_negatives(outs, labels, fn_thresh),
        avg_fg=avg_foreground_after_nms(fg_flags),
        proposal_recall=proposal_recall(props, novel_gt, 0.5, top_k),
        logdet_cov=heldout_logdet(world, episode, state, cfg, ridge, cache),
    )
