"""Two-phase training of the synthetic detector.

Phase 1 trains the shared linear extractor, the CoRPN head and a base-class
box classifier with SGD + momentum. Phase 2 freezes everything up to and
including the proposal generator and fine-tunes only the classifier on
k-shot support scenes, using the boxes the frozen RPNs actually propose.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.special import expit, log_softmax, softmax

from . import corpn
from .corpn import CoRpnHead, LossBreakdown, LossConfig
from .geometry import AnchorLabel, label_anchors, nms, pairwise_iou
from .simworld import Episode, Scene, World, render_features, stream

log = logging.getLogger(__name__)

# trainer stream ids, disjoint from the world's
_INIT, _SAMPLE, _PHASE2, _MEMBER = 100, 101, 102, 103


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, term: str, value: float):
        self.step, self.term, self.value = step, term, value
        super().__init__(f"non-finite {term} loss ({value!r}) at step {step}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.2
    momentum: float = 0.9
    batch_scenes: int = 4
    phase1_steps: int = 300
    phase2_steps: int = 150
    phase2_lr: float = 0.1
    anchors_per_scene: int = 64
    fg_fraction: float = 0.25
    seed: int = 0
    phase2_mode: str = "balanced"
    classifier: str = "fc"
    cosine_scale: float = 10.0
    fg_thresh: float = 0.7
    bg_thresh: float = 0.3
    init_scale: float = 0.01
    pre_nms_top_k: int = 200
    nms_thresh: float = 0.7
    post_nms_top_k: int = 20
    match_iou: float = 0.5

    def __post_init__(self):
        if self.phase2_mode not in ("balanced", "novel_only"):
            raise ValueError(f"unknown phase2_mode {self.phase2_mode!r}")
        if self.classifier not in ("fc", "cosine"):
            raise ValueError(f"unknown classifier variant {self.classifier!r}")
        if not 0 < self.fg_fraction <= 0.25:
            raise ValueError("fg_fraction must be in (0, 0.25] (fg:bg at most 1:3)")
        if self.lr <= 0 or self.phase2_lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("need lr > 0 and 0 <= momentum < 1")

    def check_minibatch(self, n_rpns: int) -> None:
        if self.anchors_per_scene <= n_rpns:
            raise ValueError(f"anchors_per_scene={self.anchors_per_scene} must exceed n_rpns={n_rpns}")


# ----------------------------------------------------------------------------
# parameters


@dataclass
class ClassifierHead:
    """Softmax box classifier; row 0 is background, row i+1 is ``categories[i]``."""

    categories: tuple
    weights: np.ndarray
    biases: np.ndarray
    variant: str = "fc"
    scale: float = 10.0

    @classmethod
    def init(cls, categories, dim, rng, variant="fc", scale=10.0, init_scale=0.01):
        n = len(categories) + 1
        return cls(tuple(int(c) for c in categories), rng.normal(0.0, init_scale, size=(n, dim)),
                   np.zeros(n), variant, scale)

    def copy(self) -> "ClassifierHead":
        return replace(self, weights=self.weights.copy(), biases=self.biases.copy())

    def row_of(self, category: int) -> int:
        return self.categories.index(int(category)) + 1

    def expand(self, new_categories, rng, init_scale=0.01) -> "ClassifierHead":
        """Append randomly initialized rows for ``new_categories``."""
        new = [int(c) for c in new_categories if int(c) not in self.categories]
        w = np.vstack([self.weights, rng.normal(0.0, init_scale, size=(len(new), self.weights.shape[1]))])
        b = np.concatenate([self.biases, np.zeros(len(new))])
        return replace(self, categories=self.categories + tuple(new), weights=w, biases=b)

    def logits(self, H) -> np.ndarray:
        """``(C+1) x M`` class logits for pooled features ``H`` (``dim x M``)."""
        if self.variant == "fc":
            return self.weights @ H + self.biases[:, None]
        wn = np.linalg.norm(self.weights, axis=1) + 1e-12
        hn = np.linalg.norm(H, axis=0) + 1e-12
        return self.scale * (self.weights @ H) / (wn[:, None] * hn[None, :])

    def predict_proba(self, H) -> np.ndarray:
        return softmax(self.logits(H), axis=0)

    def loss_and_grads(self, H, targets):
        """Mean softmax cross-entropy and gradients ``(dW, db, dH)``."""
        targets = np.asarray(targets, dtype=int)
        m = targets.shape[0]
        z = self.logits(H)
        logp = log_softmax(z, axis=0)
        cols = np.arange(m)
        loss = float(-np.mean(logp[targets, cols]))
        dz = np.exp(logp)
        dz[targets, cols] -= 1.0
        dz /= m
        if self.variant == "fc":
            return loss, dz @ H.T, dz.sum(axis=1), self.weights.T @ dz
        W = self.weights
        wn = np.linalg.norm(W, axis=1) + 1e-12
        hn = np.linalg.norm(H, axis=0) + 1e-12
        What = W / wn[:, None]
        Hhat = H / hn[None, :]
        cos = What @ Hhat
        # d(s cos)/dw_c = s (h_hat - cos w_hat) / |w_c| ; same shape for h
        g = self.scale * dz
        dW = (g @ Hhat.T - np.sum(g * cos, axis=1)[:, None] * What) / wn[:, None]
        dH = (What.T @ g - Hhat * np.sum(g * cos, axis=0)[None, :]) / hn[None, :]
        return loss, dW, np.zeros_like(self.biases), dH


@dataclass
class DetectorState:
    extractor: np.ndarray  # H x D shared linear projection
    head: CoRpnHead
    classifier: ClassifierHead

    def copy(self) -> "DetectorState":
        return DetectorState(self.extractor.copy(), self.head.copy(), self.classifier.copy())

    def rpn_probs(self, X) -> np.ndarray:
        return corpn.forward(self.head, self.extractor @ X).probs

    def box_features(self, X) -> np.ndarray:
        """Classifier input for proposal anchors with raw features ``X``."""
        return self.extractor @ X

    def rpn_checksum(self) -> str:
        return corpn.head_checksum(self.head, self.extractor)

    @property
    def n_rpns(self) -> int:
        return self.head.n_rpns


@dataclass
class EnsembleState(DetectorState):
    """Separately trained single-RPN models read out as one stacked ensemble.

    The downstream classifier rides on member 0's extractor.
    """

    members: list = field(default_factory=list)  # of (extractor, CoRpnHead)

    def copy(self) -> "EnsembleState":
        return EnsembleState(self.extractor.copy(), self.head.copy(), self.classifier.copy(),
                             [(P.copy(), h.copy()) for P, h in self.members])

    def rpn_probs(self, X) -> np.ndarray:
        return np.vstack([corpn.forward(h, P @ X).probs for P, h in self.members])

    def rpn_checksum(self) -> str:
        h = hashlib.sha256()
        for P, head in self.members:
            h.update(corpn.head_checksum(head, P).encode())
        return h.hexdigest()

    @property
    def n_rpns(self) -> int:
        return sum(h.n_rpns for _, h in self.members)


def init_state(world: World, n_rpns: int, cfg: TrainConfig, seed: Optional[int] = None) -> DetectorState:
    seed = cfg.seed if seed is None else seed
    rng = stream(seed, _INIT)
    d = world.feature_dim
    extractor = np.eye(d) + rng.normal(0.0, cfg.init_scale, size=(d, d))
    head = CoRpnHead.init(n_rpns, d, rng, cfg.init_scale)
    classifier = ClassifierHead.init(world.split.base_classes, d, rng, cfg.classifier,
                                     cfg.cosine_scale, cfg.init_scale)
    return DetectorState(extractor, head, classifier)


# ----------------------------------------------------------------------------
# scene tensors


@dataclass
class SceneData:
    X: np.ndarray  # D x N_A anchor features
    labels: np.ndarray  # AnchorLabel per anchor
    best_gt: np.ndarray  # index of the best-overlapping gt object, -1 if none
    best_iou: np.ndarray


class SceneCache:
    """Lazily renders and labels scenes of one world."""

    def __init__(self, world: World, cfg: TrainConfig):
        self.world = world
        self.cfg = cfg
        self._data: dict[str, SceneData] = {}

    def __call__(self, scene: Scene) -> SceneData:
        data = self._data.get(scene.scene_id)
        if data is None:
            data = self._data[scene.scene_id] = self._build(scene)
        return data

    def _build(self, scene: Scene) -> SceneData:
        w = self.world
        X = render_features(scene, w)
        labels = label_anchors(w.anchors, scene.boxes, self.cfg.fg_thresh, self.cfg.bg_thresh)
        if scene.objects:
            ov = pairwise_iou(w.anchors, scene.boxes)
            best_gt = ov.argmax(axis=1)
            best_iou = ov.max(axis=1)
        else:
            best_gt = np.full(len(w.anchors), -1)
            best_iou = np.zeros(len(w.anchors))
        return SceneData(X, labels, best_gt, best_iou)


def sample_anchors(rng: np.random.Generator, labels, n: int, fg_fraction: float) -> np.ndarray:
    """Foreground-capped anchor minibatch for one scene, background filling the rest."""
    fg = np.flatnonzero(labels == AnchorLabel.FOREGROUND)
    bg = np.flatnonzero(labels == AnchorLabel.BACKGROUND)
    n_fg = min(len(fg), int(n * fg_fraction))
    n_bg = min(len(bg), n - n_fg)
    return np.concatenate([rng.choice(fg, n_fg, replace=False), rng.choice(bg, n_bg, replace=False)])


@dataclass
class Minibatch:
    X: np.ndarray  # RPN anchors
    labels: np.ndarray  # 1 fg, 0 bg
    Xcls: np.ndarray  # classifier boxes
    cls_targets: np.ndarray  # classifier row, 0 = background


def build_minibatch(rng, cache: SceneCache, scenes: list, classifier: ClassifierHead,
                    cfg: TrainConfig) -> Minibatch:
    """RPN anchors (IOU-labeled) plus a separate classifier sample from the same scenes.

    Classifier boxes count as positives at ``match_iou``, the same rule used
    to label proposals in phase 2.
    """
    idx = rng.choice(len(scenes), size=min(cfg.batch_scenes, len(scenes)), replace=False)
    Xs, ys, Cs, ts = [], [], [], []
    for i in idx:
        scene = scenes[i]
        data = cache(scene)
        a = sample_anchors(rng, data.labels, cfg.anchors_per_scene, cfg.fg_fraction)
        Xs.append(data.X[:, a])
        ys.append((data.labels[a] == AnchorLabel.FOREGROUND).astype(float))
        hit = data.best_iou >= cfg.match_iou
        cls_labels = np.where(hit, AnchorLabel.FOREGROUND, AnchorLabel.BACKGROUND)
        k = sample_anchors(rng, cls_labels, cfg.anchors_per_scene, cfg.fg_fraction)
        cats = scene.categories
        ts.append(np.array([classifier.row_of(cats[data.best_gt[j]]) if hit[j] else 0 for j in k], dtype=int))
        Cs.append(data.X[:, k])
    return Minibatch(np.hstack(Xs), np.concatenate(ys), np.hstack(Cs), np.concatenate(ts))


# ----------------------------------------------------------------------------
# optimizer


def sgd_step(params: np.ndarray, grads: np.ndarray, lr: float, momentum: float,
             velocity: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Heavy-ball update: ``v = momentum * v - lr * g``; ``p = p + v``."""
    if not (np.all(np.isfinite(params)) and np.all(np.isfinite(grads)) and np.all(np.isfinite(velocity))):
        raise FloatingPointError("sgd_step received non-finite input")
    if params.shape != grads.shape or params.shape != velocity.shape:
        raise ValueError("params, grads and velocity must share a shape")
    v = momentum * velocity - lr * grads
    return params + v, v


class _Momentum:
    def __init__(self, lr, momentum):
        self.lr, self.momentum = lr, momentum
        self.v: dict[str, np.ndarray] = {}

    def step(self, name, p, g):
        v = self.v.get(name)
        if v is None:
            v = np.zeros_like(p)
        p, self.v[name] = sgd_step(p, g, self.lr, self.momentum, v)
        return p


# ----------------------------------------------------------------------------
# phase 1


@dataclass
class StepRecord:
    step: int
    loss: LossBreakdown
    cls: float


StepHook = Callable[[int, corpn.ForwardOutput, corpn.HeadGradients, Minibatch], None]


def _check(step, **terms):
    for name, v in terms.items():
        if not np.isfinite(v):
            raise TrainingDiverged(step, name, v)


def phase1_train(world: World, episode: Episode, state: DetectorState, cfg: TrainConfig,
                 loss_cfg: LossConfig, hook: Optional[StepHook] = None,
                 seed: Optional[int] = None) -> tuple[DetectorState, list[StepRecord]]:
    """Base-class training of extractor, CoRPN head and classifier."""
    if not episode.base_train:
        raise ValueError("episode has no base training scenes")
    cfg.check_minibatch(state.head.n_rpns)
    seed = cfg.seed if seed is None else seed
    state = state.copy()
    rng = stream(seed, _SAMPLE)
    cache = SceneCache(world, cfg)
    opt = _Momentum(cfg.lr, cfg.momentum)
    history = []
    P, W, b = state.extractor, state.head.weights, state.head.biases
    V, c = state.classifier.weights, state.classifier.biases
    for step in range(cfg.phase1_steps):
        mb = build_minibatch(rng, cache, episode.base_train, state.classifier, cfg)
        H = P @ mb.X
        head = CoRpnHead(W, b)
        out = corpn.forward(head, H)
        breakdown, g = corpn.total_loss(head, H, out, mb.labels, mb.labels > 0, loss_cfg)
        cls_loss, dV, dc, dHp = state.classifier.loss_and_grads(P @ mb.Xcls, mb.cls_targets)
        _check(step, ce=breakdown.ce, div=breakdown.div, coop=breakdown.coop, cls=cls_loss)
        if hook is not None:
            hook(step, out, g, mb)
        dP = g.features @ mb.X.T + dHp @ mb.Xcls.T
        W = opt.step("W", W, g.weights)
        b = opt.step("b", b, g.biases)
        V = opt.step("V", V, dV)
        c = opt.step("c", c, dc)
        P = opt.step("P", P, dP)
        state.classifier = replace(state.classifier, weights=V, biases=c)
        history.append(StepRecord(step, breakdown, cls_loss))
    state.extractor = P
    state.head = CoRpnHead(W, b)
    return state, history


def phase1_train_single(world: World, episode: Episode, state: DetectorState, cfg: TrainConfig,
                        seed: Optional[int] = None) -> tuple[DetectorState, list[StepRecord]]:
    """Reference trainer for a plain single-classifier RPN (binary CE only).

    Kept deliberately separate from the CoRPN loss path so the N=1 reduction
    can be checked against it.
    """
    if state.head.n_rpns != 1:
        raise ValueError("reference trainer handles exactly one RPN")
    seed = cfg.seed if seed is None else seed
    state = state.copy()
    rng = stream(seed, _SAMPLE)
    cache = SceneCache(world, cfg)
    opt = _Momentum(cfg.lr, cfg.momentum)
    history = []
    P = state.extractor
    w, b = state.head.weights, state.head.biases
    V, c = state.classifier.weights, state.classifier.biases
    for step in range(cfg.phase1_steps):
        mb = build_minibatch(rng, cache, episode.base_train, state.classifier, cfg)
        H = P @ mb.X
        r = w @ H + b[:, None]
        y = mb.labels
        m = y.shape[0]
        ce = float(np.mean(np.logaddexp(0.0, r[0]) - y * r[0]))
        gr = (expit(r) - y) / m
        cls_loss, dV, dc, dHp = state.classifier.loss_and_grads(P @ mb.Xcls, mb.cls_targets)
        _check(step, ce=ce, cls=cls_loss)
        dP = (w.T @ gr) @ mb.X.T + dHp @ mb.Xcls.T
        w = opt.step("W", w, gr @ H.T)
        b = opt.step("b", b, gr.sum(axis=1))
        V = opt.step("V", V, dV)
        c = opt.step("c", c, dc)
        P = opt.step("P", P, dP)
        state.classifier = replace(state.classifier, weights=V, biases=c)
        history.append(StepRecord(step, LossBreakdown(ce, 0.0, 0.0, ce), cls_loss))
    state.extractor = P
    state.head = CoRpnHead(w, b)
    return state, history


def train_naive_ensemble(world: World, episode: Episode, cfg: TrainConfig,
                         n_rpns: int) -> tuple[EnsembleState, list[list[StepRecord]]]:
    """N single-RPN models trained separately from different seeds.

    Member 0 uses the run seed itself, so ``n_rpns=1`` is exactly the
    single-RPN baseline.
    """
    if n_rpns < 1:
        raise ValueError("n_rpns must be >= 1")
    members, histories = [], []
    first = None
    for m in range(n_rpns):
        seed = member_seed(cfg.seed, m)
        st = init_state(world, 1, cfg, seed=seed)
        st, hist = phase1_train_single(world, episode, st, cfg, seed=seed)
        if first is None:
            first = st
        members.append((st.extractor, st.head))
        histories.append(hist)
    ens = EnsembleState(first.extractor, first.head, first.classifier, members)
    return ens, histories


def member_seed(seed: int, member: int) -> int:
    if member == 0:
        return int(seed)
    return int(np.random.SeedSequence(int(seed), spawn_key=(_MEMBER, member)).generate_state(1, np.uint64)[0])


# ----------------------------------------------------------------------------
# proposals and phase 2


def propose(world: World, probs: np.ndarray, cfg: TrainConfig):
    """Rank anchors by the most-certain score, NMS, keep the top boxes.

    Returns ``(indices, scores, is_foreground)`` of the kept anchors in rank order.
    """
    scores, is_fg = corpn.score_boxes(probs)
    order = np.lexsort((np.arange(len(scores)), -scores))[:cfg.pre_nms_top_k]
    keep = nms(world.anchors[order], scores[order], cfg.nms_thresh)[:cfg.post_nms_top_k]
    idx = order[keep]
    return idx, scores[idx], is_fg[idx]


def proposal_targets(world: World, scene: Scene, idx, classifier: ClassifierHead, match_iou: float):
    if not scene.objects or len(idx) == 0:
        return np.zeros(len(idx), dtype=int)
    ov = pairwise_iou(world.anchors[idx], scene.boxes)
    best = ov.argmax(axis=1)
    hit = ov[np.arange(len(idx)), best] >= match_iou
    cats = scene.categories
    return np.array([classifier.row_of(cats[j]) if h else 0 for j, h in zip(best, hit)], dtype=int)


def phase2_finetune(world: World, state: DetectorState, episode: Episode, cfg: TrainConfig,
                    mode: Optional[str] = None) -> DetectorState:
    """Fine-tune only the box classifier on support scenes.

    The classifier is first expanded with randomly initialized novel rows.
    Training samples are the frozen RPN's proposals, labeled by IOU match.
    """
    mode = mode or cfg.phase2_mode
    before = state.rpn_checksum()
    new = state.copy()
    rng = stream(cfg.seed, _PHASE2)
    clf = new.classifier.expand(episode.split.novel_classes, rng, cfg.init_scale)
    cache = SceneCache(world, cfg)
    feats, targets = [], []
    for scene in episode.support(mode):
        data = cache(scene)
        idx, _, _ = propose(world, new.rpn_probs(data.X), cfg)
        feats.append(new.box_features(data.X[:, idx]))
        targets.append(proposal_targets(world, scene, idx, clf, cfg.match_iou))
    Hp = np.hstack(feats)
    t = np.concatenate(targets)
    opt = _Momentum(cfg.phase2_lr, cfg.momentum)
    V, c = clf.weights, clf.biases
    for step in range(cfg.phase2_steps):
        loss, dV, dc, _ = clf.loss_and_grads(Hp, t)
        _check(step, cls=loss)
        V = opt.step("V", V, dV)
        c = opt.step("c", c, dc)
        clf = replace(clf, weights=V, biases=c)
    new.classifier = clf
    if new.rpn_checksum() != before:
        raise AssertionError("phase 2 modified the frozen proposal generator")
    return new


# ----------------------------------------------------------------------------
# loss curves


def write_loss_csv(history: list[StepRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("step,ce,div,coop,total\n")
        for rec in history:
            l = rec.loss
            fh.write(f"{rec.step},{l.ce:.6f},{l.div:.6f},{l.coop:.6f},{l.total:.6f}\n")
