"""Label-corruption models and their simulation."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ParseError


@dataclass(frozen=True)
class FlipSpec:
    """Directed class flips ``src -> dst`` applied with total probability ``p_e``."""

    pairs: tuple
    p_e: float

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple((int(s), int(d)) for s, d in self.pairs))
        if not 0.0 <= self.p_e < 1.0:
            raise ContractError(f"noise probability must be in [0, 1), got {self.p_e}")
        for s, d in self.pairs:
            if s == d:
                raise ContractError(f"flip {s}->{d} maps a class to itself")
            if s < 0 or d < 0:
                raise ContractError(f"negative class index in flip {s}->{d}")

    @classmethod
    def parse(cls, items, p_e):
        """Build from strings like ``"0->1"``; ``"a<->b"`` adds both directions."""
        pairs = []
        for item in items:
            item = item.strip()
            if "<->" in item:
                a, b = item.split("<->")
                pairs += [(int(a), int(b)), (int(b), int(a))]
            elif "->" in item:
                a, b = item.split("->")
                pairs.append((int(a), int(b)))
            else:
                raise ContractError(f"cannot parse flip {item!r}; expected 'src->dst'")
        return cls(tuple(pairs), p_e)


def check_transition(E, atol=1e-12):
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] != E.shape[1] or E.shape[0] < 2:
        raise ContractError(f"transition matrix must be square with c >= 2, got {E.shape}")
    if np.any(E < 0) or np.any(E > 1):
        raise ContractError("transition matrix entries must lie in [0, 1]")
    if np.max(np.abs(E.sum(axis=1) - 1.0)) > atol:
        raise ContractError("transition matrix rows must sum to 1")
    return E


def symmetric_matrix(c, p_e):
    """Diagonal ``1 - p_e``, flip mass spread evenly: ``p_e / (c - 1)`` off the diagonal."""
    if c < 2:
        raise ContractError("need at least two classes")
    if not 0.0 <= p_e < 1.0:
        raise ContractError(f"noise probability must be in [0, 1), got {p_e}")
    E = np.full((c, c), p_e / (c - 1))
    np.fill_diagonal(E, 1.0 - p_e)
    return E


def asymmetric_matrix(c, spec):
    E = np.eye(c)
    targets = {}
    for s, d in spec.pairs:
        if s >= c or d >= c:
            raise ContractError(f"flip {s}->{d} refers to a class >= {c}")
        targets.setdefault(s, []).append(d)
    for s, dsts in targets.items():
        E[s, s] = 1.0 - spec.p_e
        for d in dsts:
            E[s, d] += spec.p_e / len(dsts)
    return E


def apply_noise(labels, E, rng):
    """Resample each one-hot label from its row of ``E``.

    Returns ``(noisy one-hot labels, boolean flip mask)``.
    """
    labels = np.asarray(labels)
    E = check_transition(E)
    c = E.shape[0]
    if labels.ndim != 2 or labels.shape[1] != c:
        raise ContractError(f"labels must be one-hot over {c} classes, got shape {labels.shape}")
    clean = labels.argmax(axis=1)
    cdf = np.cumsum(E, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(clean.size)
    noisy = (u[:, None] >= cdf[clean]).sum(axis=1)
    out = np.zeros(labels.shape, dtype=np.float64)
    out[np.arange(noisy.size), noisy] = 1.0
    return out, noisy != clean


def write_transition_csv(E, path):
    E = check_transition(E)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([E.shape[0]])
        for row in E:
            w.writerow([repr(float(v)) for v in row])


def read_transition_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file")
    try:
        c = int(rows[0][0])
    except (ValueError, IndexError):
        raise ParseError("first line must hold the class count", line=1) from None
    if len(rows) != c + 1:
        raise ParseError(f"{path}: expected {c} matrix rows, found {len(rows) - 1}")
    E = np.empty((c, c))
    for i, row in enumerate(rows[1:]):
        if len(row) != c:
            raise ParseError(f"expected {c} values", line=i + 2)
        try:
            E[i] = [float(v) for v in row]
        except ValueError:
            raise ParseError("non-numeric entry", line=i + 2) from None
    return check_transition(E)
