"""Cooperating RPN head: N binary objectness classifiers over shared features.

Shapes follow the column-per-anchor convention used throughout the package:
features are ``D x N_A``, raw scores and probabilities are ``N x N_A``.
"""
from __future__ import annotations

import hashlib
import io
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from . import linalg

HEAD_FORMAT = "corpn-head"
HEAD_FORMAT_VERSION = 1


@dataclass
class CoRpnHead:
    weights: np.ndarray  # N x D
    biases: np.ndarray  # N

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=float))
        self.biases = np.asarray(self.biases, dtype=float).reshape(-1)
        if self.weights.shape[0] < 1:
            raise ValueError("a head needs at least one RPN")
        if self.biases.shape != (self.weights.shape[0],):
            raise ValueError("one bias per RPN required")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.biases))):
            raise ValueError("head parameters must be finite")

    @property
    def n_rpns(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def init(cls, n_rpns: int, feature_dim: int, rng: np.random.Generator, scale: float = 0.01):
        return cls(rng.normal(0.0, scale, size=(n_rpns, feature_dim)), np.zeros(n_rpns))

    def copy(self) -> "CoRpnHead":
        return CoRpnHead(self.weights.copy(), self.biases.copy())


@dataclass
class ForwardOutput:
    raw: np.ndarray  # N x N_A
    probs: np.ndarray  # N x N_A
    selected: np.ndarray  # N_A, index of the most certain RPN per anchor


@dataclass
class LossConfig:
    phi: float = 0.3
    lambda_d: float = 0.05
    lambda_c: float = 1.0
    ridge: float = 1e-6
    diversity: str = "logdet"  # or "cosine" for the pairwise-cosine baseline

    def __post_init__(self):
        if not 0.0 < self.phi < 1.0:
            raise ValueError("phi must lie in (0, 1)")
        if self.phi >= 0.5:
            warnings.warn(f"phi={self.phi} >= 0.5 forces every RPN towards foreground on positives",
                          stacklevel=2)
        if self.lambda_d < 0 or self.lambda_c < 0 or self.ridge < 0:
            raise ValueError("lambda_d, lambda_c and ridge must be >= 0")
        if self.diversity not in ("logdet", "cosine"):
            raise ValueError(f"unknown diversity term {self.diversity!r}")


@dataclass
class LossBreakdown:
    ce: float
    div: float
    coop: float
    total: float


@dataclass
class HeadGradients:
    weights: np.ndarray
    biases: np.ndarray
    features: np.ndarray  # D x N_A, to be pushed into the shared extractor
    raw: np.ndarray  # total gradient w.r.t. raw scores
    ce_raw: np.ndarray = field(repr=False)  # routed CE part alone


def certainty(f) -> np.ndarray:
    """Distance to the nearest edge of [0, 1]; smaller means more certain."""
    f = np.asarray(f, dtype=float)
    return np.minimum(f, 1.0 - f)


def select_rpn(f_col) -> int:
    """Index of the most certain RPN for one anchor (lowest index on ties)."""
    return int(np.argmin(certainty(f_col)))


def select_rpns(F) -> np.ndarray:
    """Column-wise :func:`select_rpn` over an ``N x N_A`` probability matrix."""
    return np.argmin(certainty(F), axis=0)


def forward(head: CoRpnHead, features) -> ForwardOutput:
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or features.shape[0] != head.feature_dim:
        raise ValueError(f"features must be {head.feature_dim} x N_A, got {features.shape}")
    raw = head.weights @ features + head.biases[:, None]
    probs = expit(raw)
    return ForwardOutput(raw, probs, select_rpns(probs))


def ce_loss_selected(out: ForwardOutput, labels) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy through each anchor's selected RPN.

    The returned gradient is w.r.t. raw scores and is nonzero only at
    ``(selected[i], i)``.
    """
    y = np.asarray(labels, dtype=float)
    m = y.shape[0]
    cols = np.arange(m)
    r = out.raw[out.selected, cols]
    f = out.probs[out.selected, cols]
    loss = float(np.mean(np.logaddexp(0.0, r) - y * r))
    grad = np.zeros_like(out.raw)
    grad[out.selected, cols] = (f - y) / m
    return loss, grad


def diversity_loss(F, ridge: float = 1e-6) -> tuple[float, np.ndarray]:
    """Negative log-determinant of the row covariance; gradient w.r.t. ``F``."""
    S = linalg.covariance(F)
    loss = -linalg.logdet_psd(S, ridge)
    grad = -linalg.chain_covariance_grad(F, linalg.grad_logdet(S, ridge))
    return loss, grad


def coop_loss(F, fg_mask, phi: float) -> tuple[float, np.ndarray]:
    """Hinge ``max(0, phi - f)`` averaged over foreground anchors and all RPNs."""
    F = np.asarray(F, dtype=float)
    fg = np.asarray(fg_mask, dtype=bool)
    grad = np.zeros_like(F)
    n_fg = int(fg.sum())
    if n_fg == 0:
        return 0.0, grad
    Ff = F[:, fg]
    count = Ff.size
    loss = float(np.sum(np.maximum(0.0, phi - Ff)) / count)
    # strict inequality: the kink itself gets the inactive subgradient
    grad[:, fg] = np.where(Ff < phi, -1.0 / count, 0.0)
    return loss, grad


def cosine_diversity_loss(F) -> tuple[float, np.ndarray]:
    """Mean pairwise cosine similarity between mean-centered RPN rows.

    Pairs involving a zero-norm centered row contribute 0 with zero gradient.
    """
    F = np.atleast_2d(np.asarray(F, dtype=float))
    n = F.shape[0]
    if n < 2:
        raise ValueError("cosine diversity needs at least two RPNs")
    C = F - F.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.sum(C * C, axis=1))
    # constant rows leave rounding residue after centering; treat them as zero
    ok = norms > 1e-12 * np.sqrt(F.shape[1]) * max(1.0, float(np.abs(F).max()))
    U = np.zeros_like(C)
    U[ok] = C[ok] / norms[ok, None]
    cos = U @ U.T
    n_pairs = n * (n - 1) / 2
    iu = np.triu_indices(n, k=1)
    loss = float(np.sum(cos[iu]) / n_pairs)

    # d cos_jk / d c_j = (u_k - cos_jk u_j) / |c_j|
    off = cos - np.diag(np.diag(cos))
    dC = np.zeros_like(C)
    dC[ok] = ((U.sum(axis=0)[None, :] - U)[ok] - off.sum(axis=1)[ok, None] * U[ok]) / norms[ok, None]
    # U rows of zero-norm entries are zero, so they drop out of the sums above
    dC /= n_pairs
    dF = dC - dC.mean(axis=1, keepdims=True)
    return loss, dF


def total_loss(head: CoRpnHead, features, out: ForwardOutput, labels, fg_mask,
               cfg: LossConfig) -> tuple[LossBreakdown, HeadGradients]:
    """Combined objective ``ce + lambda_d * div + lambda_c * coop`` and its gradients.

    CE is routed through the selected RPN per anchor; diversity and
    cooperation reach every RPN.
    """
    features = np.asarray(features, dtype=float)
    ce, d_raw = ce_loss_selected(out, labels)
    ce_raw = d_raw.copy()
    F = out.probs
    dF = None
    div = 0.0
    if cfg.diversity == "cosine":
        if head.n_rpns > 1:
            div, g = cosine_diversity_loss(F)
            if cfg.lambda_d:
                dF = cfg.lambda_d * g
    else:
        div, g = diversity_loss(F, cfg.ridge)
        if cfg.lambda_d:
            dF = cfg.lambda_d * g
    coop = 0.0
    if cfg.lambda_c:
        coop, g = coop_loss(F, fg_mask, cfg.phi)
        dF = cfg.lambda_c * g if dF is None else dF + cfg.lambda_c * g
    else:
        coop = coop_loss(F, fg_mask, cfg.phi)[0]
    if dF is not None:
        d_raw = d_raw + dF * F * (1.0 - F)

    total = ce
    if cfg.lambda_d:
        total = total + cfg.lambda_d * div
    if cfg.lambda_c:
        total = total + cfg.lambda_c * coop
    grads = HeadGradients(
        weights=d_raw @ features.T,
        biases=d_raw.sum(axis=1),
        features=head.weights.T @ d_raw,
        raw=d_raw,
        ce_raw=ce_raw,
    )
    return LossBreakdown(ce, div, coop, total), grads


def score_box(f_col) -> tuple[float, bool]:
    """Score of the most certain RPN, and whether the box counts as foreground."""
    f_col = np.asarray(f_col, dtype=float)
    score = float(f_col[select_rpn(f_col)])
    return score, bool(f_col.max() + f_col.min() > 1.0)


def score_boxes(F) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`score_box` over the columns of ``F``."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    sel = select_rpns(F)
    scores = F[sel, np.arange(F.shape[1])]
    return scores, F.max(axis=0) + F.min(axis=0) > 1.0


def dumps_head(head: CoRpnHead) -> str:
    """Serialize a head to the versioned text record.

    Layout, one field per line::

        corpn-head 1
        n_rpns <N>
        feature_dim <D>
        weights <N*D floats, row-major>
        biases <N floats>

    Floats are written with ``repr`` so a round trip is exact.
    """
    buf = io.StringIO()
    buf.write(f"{HEAD_FORMAT} {HEAD_FORMAT_VERSION}\n")
    buf.write(f"n_rpns {head.n_rpns}\n")
    buf.write(f"feature_dim {head.feature_dim}\n")
    buf.write("weights " + " ".join(repr(float(v)) for v in head.weights.ravel()) + "\n")
    buf.write("biases " + " ".join(repr(float(v)) for v in head.biases) + "\n")
    return buf.getvalue()


def loads_head(text: str) -> CoRpnHead:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) != 5:
        raise ValueError(f"head record must have 5 lines, got {len(lines)}")
    magic = lines[0].split()
    if len(magic) != 2 or magic[0] != HEAD_FORMAT:
        raise ValueError("not a corpn-head record")
    if int(magic[1]) != HEAD_FORMAT_VERSION:
        raise ValueError(f"unsupported head format version {magic[1]}")

    def field_(line, name):
        key, _, rest = line.partition(" ")
        if key != name:
            raise ValueError(f"expected field {name!r}, found {key!r}")
        return rest.split()

    n = int(field_(lines[1], "n_rpns")[0])
    d = int(field_(lines[2], "feature_dim")[0])
    w = np.array([float(v) for v in field_(lines[3], "weights")])
    b = np.array([float(v) for v in field_(lines[4], "biases")])
    if w.size != n * d or b.size != n:
        raise ValueError("head record sizes do not match its header")
    return CoRpnHead(w.reshape(n, d), b)


def save_head(head: CoRpnHead, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_head(head))


def load_head(path) -> CoRpnHead:
    with open(path) as fh:
        return loads_head(fh.read())


def stack_heads(heads: list[CoRpnHead]) -> CoRpnHead:
    return CoRpnHead(np.vstack([h.weights for h in heads]), np.concatenate([h.biases for h in heads]))


def head_checksum(head: CoRpnHead, extra: Optional[np.ndarray] = None) -> str:
    h = hashlib.sha256(head.weights.tobytes())
    h.update(head.biases.tobytes())
    if extra is not None:
        h.update(np.ascontiguousarray(extra).tobytes())
    return h.hexdigest()
