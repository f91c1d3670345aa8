"""Versioned text checkpoints for trained detectors.

Layout (one ``key value...`` record per line)::

    corpn-checkpoint 1
    config_hash <hex>
    members <M>
    extractor <rows> <cols> <floats...>     \\
    <embedded corpn-head record, 5 lines>    / repeated M times
    classifier <variant> <scale>
    categories <ints...>
    classifier_weights <rows> <cols> <floats...>
    classifier_biases <floats...>

M is 1 for single and CoRPN detectors and N for a naive ensemble, whose
classifier rides on member 0's extractor. Floats use ``repr`` so a round
trip is exact.
"""
from __future__ import annotations

import numpy as np

from .corpn import dumps_head, loads_head
from .train import ClassifierHead, DetectorState, EnsembleState

CHECKPOINT_FORMAT = "corpn-checkpoint"
CHECKPOINT_VERSION = 1


def _floats(a) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(a))


def _matrix(name, a) -> str:
    return f"{name} {a.shape[0]} {a.shape[1]} {_floats(a)}"


def dumps_checkpoint(state: DetectorState, config_hash: str = "") -> str:
    members = state.members if isinstance(state, EnsembleState) else [(state.extractor, state.head)]
    clf = state.classifier
    lines = [f"{CHECKPOINT_FORMAT} {CHECKPOINT_VERSION}", f"config_hash {config_hash or '-'}",
             f"members {len(members)}"]
    for P, head in members:
        lines.append(_matrix("extractor", P))
        lines.extend(dumps_head(head).splitlines())
    lines.append(f"classifier {clf.variant} {clf.scale!r}")
    lines.append("categories " + " ".join(str(c) for c in clf.categories))
    lines.append(_matrix("classifier_weights", clf.weights))
    lines.append("classifier_biases " + _floats(clf.biases))
    return "\n".join(lines) + "\n"


def _take(lines, i, key):
    if i >= len(lines):
        raise ValueError(f"checkpoint truncated: expected {key!r}")
    head, _, rest = lines[i].partition(" ")
    if head != key:
        raise ValueError(f"checkpoint line {i + 1}: expected {key!r}, found {head!r}")
    return rest.split()


def _read_matrix(fields):
    r, c = int(fields[0]), int(fields[1])
    vals = np.array([float(v) for v in fields[2:]])
    if vals.size != r * c:
        raise ValueError("matrix record size does not match its shape")
    return vals.reshape(r, c)


def loads_checkpoint(text: str) -> tuple[DetectorState, str]:
    """Parse a checkpoint; returns ``(state, config_hash)``."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty checkpoint")
    magic = lines[0].split()
    if len(magic) != 2 or magic[0] != CHECKPOINT_FORMAT:
        raise ValueError("not a corpn-checkpoint file")
    if int(magic[1]) != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {magic[1]}")
    config_hash = _take(lines, 1, "config_hash")[0]
    n = int(_take(lines, 2, "members")[0])
    if n < 1:
        raise ValueError("checkpoint needs at least one member")
    i = 3
    members = []
    for _ in range(n):
        P = _read_matrix(_take(lines, i, "extractor"))
        head = loads_head("\n".join(lines[i + 1:i + 6]))
        members.append((P, head))
        i += 6
    variant, scale = _take(lines, i, "classifier")
    cats = tuple(int(c) for c in _take(lines, i + 1, "categories"))
    W = _read_matrix(_take(lines, i + 2, "classifier_weights"))
    b = np.array([float(v) for v in _take(lines, i + 3, "classifier_biases")])
    if W.shape[0] != len(cats) + 1 or b.shape != (W.shape[0],):
        raise ValueError("classifier record sizes are inconsistent")
    clf = ClassifierHead(cats, W, b, variant, float(scale))
    P0, h0 = members[0]
    if n == 1:
        state = DetectorState(P0, h0, clf)
    else:
        state = EnsembleState(P0, h0, clf, members)
    return state, ("" if config_hash == "-" else config_hash)


def save_checkpoint(state: DetectorState, path, config_hash: str = "") -> None:
    with open(path, "w") as fh:
        fh.write(dumps_checkpoint(state, config_hash))


def load_checkpoint(path) -> tuple[DetectorState, str]:
    with open(path) as fh:
        return loads_checkpoint(fh.read())
