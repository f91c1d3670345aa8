"""scikit-learn style estimator around a bare CoRPN head.

Rows of ``X`` are anchors and columns their features; ``y`` is binary
objectness. Fitting runs minibatch SGD + momentum on the combined CoRPN
objective. The package's column-per-anchor convention is handled internally.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, validate_data

from . import corpn
from .corpn import CoRpnHead, LossConfig
from .simworld import stream
from .train import sgd_step


class CoRPNClassifier(ClassifierMixin, BaseEstimator):
    """Binary objectness classifier made of ``n_rpns`` cooperating heads.

    ``predict_proba`` reports the most-certain head's probability and
    ``predict`` the foreground vote (max + min > 1), which agree by design.
    """

    def __init__(self, n_rpns=5, phi=0.3, lambda_d=0.05, lambda_c=1.0, diversity="logdet",
                 ridge=1e-6, lr=0.2, momentum=0.9, max_iter=300, batch_size=256, init_scale=0.01,
                 random_state=0):
        self.n_rpns = n_rpns
        self.phi = phi
        self.lambda_d = lambda_d
        self.lambda_c = lambda_c
        self.diversity = diversity
        self.ridge = ridge
        self.lr = lr
        self.momentum = momentum
        self.max_iter = max_iter
        self.batch_size = batch_size
        self.init_scale = init_scale
        self.random_state = random_state

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.classifier_tags.multi_class = False
        return tags

    def _loss_config(self):
        if int(self.n_rpns) < 1:
            raise ValueError("n_rpns must be >= 1")
        if self.diversity == "cosine" and int(self.n_rpns) < 2:
            raise ValueError("cosine diversity needs n_rpns >= 2")
        return LossConfig(phi=self.phi, lambda_d=self.lambda_d, lambda_c=self.lambda_c,
                          ridge=self.ridge, diversity=self.diversity)

    def fit(self, X, y):
        X, y = validate_data(self, X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, yi = np.unique(y, return_inverse=True)
        if self.classes_.size != 2:
            raise ValueError(f"Only binary classification is supported; got {self.classes_.size} classes")
        cfg = self._loss_config()
        if self.max_iter < 0 or self.batch_size < 2:
            raise ValueError("need max_iter >= 0 and batch_size >= 2")
        seed = 0 if self.random_state is None else int(self.random_state)
        rng = stream(seed, 0)
        head = CoRpnHead.init(int(self.n_rpns), X.shape[1], rng, self.init_scale)
        W, b = head.weights, head.biases
        vW, vb = np.zeros_like(W), np.zeros_like(b)
        target = yi.astype(float)
        n = X.shape[0]
        self.loss_curve_ = []
        for _ in range(int(self.max_iter)):
            idx = rng.choice(n, size=min(self.batch_size, n), replace=False)
            H = X[idx].T
            h = CoRpnHead(W, b)
            out = corpn.forward(h, H)
            br, g = corpn.total_loss(h, H, out, target[idx], target[idx] > 0, cfg)
            if not np.isfinite(br.total):
                raise FloatingPointError("training diverged")
            W, vW = sgd_step(W, g.weights, self.lr, self.momentum, vW)
            b, vb = sgd_step(b, g.biases, self.lr, self.momentum, vb)
            self.loss_curve_.append(br.total)
        self.head_ = CoRpnHead(W, b)
        self.n_iter_ = int(self.max_iter)
        return self

    def rpn_proba(self, X) -> np.ndarray:
        """Per-head foreground probabilities, ``n_rpns x n_samples``."""
        check_is_fitted(self, "head_")
        X = validate_data(self, X, dtype=np.float64, reset=False)
        return corpn.forward(self.head_, X.T).probs

    def predict_proba(self, X) -> np.ndarray:
        scores, _ = corpn.score_boxes(self.rpn_proba(X))
        return np.column_stack([1.0 - scores, scores])

    def predict(self, X) -> np.ndarray:
        _, fg = corpn.score_boxes(self.rpn_proba(X))
        return self.classes_[fg.astype(int)]
