"""Central finite-difference checks for every analytic gradient in the package.

Each term draws random instances (N in {2, 3, 5}, N_A in {8, 16, 64}) from
its own keyed stream, skips instances that sit near a kink or a routing
switch, and compares the analytic gradient against central differences of
the loss. The error measure is ``|g - g_fd| / max(|g|, |g_fd|)`` in the
2-norm.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from . import corpn, linalg
from .simworld import stream
from .train import ClassifierHead

NS = (2, 3, 5)
NAS = (8, 16, 64)
STEP = 1e-6
MARGIN = 1e-4  # keep-out distance from kinks and selection ties


def central_diff(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


@dataclass
class Instance:
    x: np.ndarray
    loss: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    excluded: bool = False


def _shape(rng):
    return int(rng.choice(NS)), int(rng.choice(NAS))


def _near_switch(F) -> bool:
    c = np.sort(corpn.certainty(F), axis=0)
    return bool(np.any(c[1] - c[0] < MARGIN))


# each factory takes (rng, fns) where fns maps term name -> loss/grad callable


def _ce(rng, fns):
    n, na = _shape(rng)
    R = rng.normal(0.0, 2.0, size=(n, na))
    y = (rng.random(na) < 0.3).astype(float)

    def both(R):
        P = expit(R)
        return fns["ce"](corpn.ForwardOutput(R, P, corpn.select_rpns(P)), y)

    return Instance(R, lambda R: both(R)[0], lambda R: both(R)[1], _near_switch(expit(R)))


def _div(rng, fns):
    n, na = _shape(rng)
    F = rng.uniform(0.05, 0.95, size=(n, na))
    # loss value through the plain covariance/logdet path, independent of the gradient under test
    return Instance(F, lambda F: -linalg.logdet_psd(linalg.covariance(F), 1e-6),
                    lambda F: fns["div"](F, 1e-6)[1])


def _coop(rng, fns):
    n, na = _shape(rng)
    F = rng.uniform(0.0, 1.0, size=(n, na))
    fg = rng.random(na) < 0.4
    fg[0] = True
    phi = float(rng.uniform(0.1, 0.9))
    excl = bool(np.any(np.abs(F[:, fg] - phi) < MARGIN))
    return Instance(F, lambda F: fns["coop"](F, fg, phi)[0], lambda F: fns["coop"](F, fg, phi)[1], excl)


def _cosine(rng, fns):
    n, na = _shape(rng)
    F = rng.uniform(0.0, 1.0, size=(n, na))
    return Instance(F, lambda F: fns["cosine"](F)[0], lambda F: fns["cosine"](F)[1])


def _logdet(rng, fns):
    n = int(rng.choice(NS))
    A = rng.normal(size=(n, n + 3))
    S = A @ A.T / (n + 3) + 0.1 * np.eye(n)

    # symmetrizing inside the loss makes the unconstrained gradient equal the symmetric one
    def f(X):
        return linalg.logdet_psd(0.5 * (X + X.T), 1e-6)

    def g(X):
        return fns["logdet"](0.5 * (X + X.T), 1e-6)

    return Instance(S, f, g)


def _total(rng, fns):
    n, na = _shape(rng)
    d = 4
    W = rng.normal(0.0, 1.0, size=(n, d))
    b = rng.normal(0.0, 0.5, size=n)
    H = rng.normal(0.0, 1.0, size=(d, na))
    y = (rng.random(na) < 0.3).astype(float)
    cfg = corpn.LossConfig(phi=float(rng.uniform(0.1, 0.45)), lambda_d=float(rng.uniform(0.01, 0.1)),
                           lambda_c=float(rng.uniform(0.5, 2.0)))
    sizes = (W.size, b.size)

    def unpack(x):
        return (x[:sizes[0]].reshape(n, d), x[sizes[0]:sizes[0] + sizes[1]],
                x[sizes[0] + sizes[1]:].reshape(d, na))

    def both(x):
        Wx, bx, Hx = unpack(x)
        head = corpn.CoRpnHead(Wx, bx)
        out = corpn.forward(head, Hx)
        br, gr = fns["total"](head, Hx, out, y, y > 0, cfg)
        return br.total, np.concatenate([gr.weights.ravel(), gr.biases, gr.features.ravel()])

    x0 = np.concatenate([W.ravel(), b, H.ravel()])
    F = expit(W @ H + b[:, None])
    excl = _near_switch(F) or bool(np.any(np.abs(F[:, y > 0] - cfg.phi) < MARGIN))
    return Instance(x0, lambda x: both(x)[0], lambda x: both(x)[1], excl)


def _classifier(variant):
    def make(rng, fns):
        c, m = int(rng.choice(NS)), int(rng.choice(NAS))
        d = 6
        W = rng.normal(0.0, 1.0, size=(c + 1, d))
        bias = rng.normal(0.0, 0.5, size=c + 1)
        H = rng.normal(0.0, 1.0, size=(d, m))
        t = rng.integers(0, c + 1, size=m)

        def both(x):
            Wx, Hx = x[:W.size].reshape(W.shape), x[W.size:].reshape(H.shape)
            clf = ClassifierHead(tuple(range(c)), Wx, bias, variant, 5.0)
            loss, dW, _, dH = fns["classifier"](clf, Hx, t)
            return loss, np.concatenate([dW.ravel(), dH.ravel()])

        x0 = np.concatenate([W.ravel(), H.ravel()])
        return Instance(x0, lambda x: both(x)[0], lambda x: both(x)[1])
    return make


TERMS = {
    "ce": _ce,
    "div": _div,
    "coop": _coop,
    "cosine": _cosine,
    "logdet": _logdet,
    "total": _total,
    "classifier_fc": _classifier("fc"),
    "classifier_cosine": _classifier("cosine"),
}
_TERM_IDS = {name: i for i, name in enumerate(TERMS)}


def default_functions() -> dict:
    return {
        "ce": corpn.ce_loss_selected,
        "div": corpn.diversity_loss,
        "coop": corpn.coop_loss,
        "cosine": corpn.cosine_diversity_loss,
        "logdet": linalg.grad_logdet,
        "total": corpn.total_loss,
        "classifier": lambda clf, H, t: clf.loss_and_grads(H, t),
    }


@dataclass
class TermReport:
    term: str
    checked: int
    skipped: int
    max_rel_err: float
    worst_seed: int  # instance index within the term's stream
    tol: float

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_err <= self.tol


@dataclass
class GradcheckReport:
    seed: int
    terms: list

    @property
    def ok(self) -> bool:
        return all(t.passed for t in self.terms)

    def failures(self) -> list:
        return [t for t in self.terms if not t.passed]

    def format(self) -> str:
        lines = [f"gradcheck seed={self.seed}",
                 f"{'term':<18} {'checked':>7} {'skipped':>7} {'max_rel_err':>12}  result"]
        for t in self.terms:
            lines.append(f"{t.term:<18} {t.checked:>7d} {t.skipped:>7d} {t.max_rel_err:>12.3e}  "
                         f"{'PASS' if t.passed else 'FAIL'}")
        for t in self.failures():
            lines.append(f"FAIL term={t.term} instance_seed={self.seed}:{t.worst_seed} "
                         f"max_rel_err={t.max_rel_err:.3e} tol={t.tol:g}")
        return "\n".join(lines)


def check_term(name: str, n_instances: int = 100, seed: int = 0, tol: float = 1e-4,
               functions: Optional[dict] = None, max_tries: int = 10_000) -> TermReport:
    fns = default_functions()
    fns.update(functions or {})
    make = TERMS[name]
    checked = skipped = 0
    worst, worst_seed = 0.0, -1
    i = 0
    while checked < n_instances and i < max_tries:
        inst = make(stream(seed, _TERM_IDS[name], i), fns)
        if inst.excluded:
            skipped += 1
        else:
            err = rel_err(inst.grad(inst.x), central_diff(inst.loss, inst.x))
            if not np.isfinite(err):
                err = np.inf
            if worst_seed < 0 or err > worst:
                worst, worst_seed = err, i
            checked += 1
        i += 1
    return TermReport(name, checked, skipped, float(worst), worst_seed, tol)


def run_gradcheck(n_instances: int = 100, seed: int = 0, tol: float = 1e-4, terms=None,
                  functions: Optional[dict] = None) -> GradcheckReport:
    """Run the finite-difference suite; ``functions`` swaps in alternative gradients."""
    names = list(TERMS) if terms is None else list(terms)
    unknown = [t for t in names if t not in TERMS]
    if unknown:
        raise ValueError(f"unknown gradcheck terms {unknown}")
    return GradcheckReport(seed, [check_term(t, n_instances, seed, tol, functions) for t in names])
