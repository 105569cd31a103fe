"""Baseline classification losses on predicted probabilities.

Every loss takes targets ``y`` (N x c) and probabilities ``p`` (N x c) and
returns ``(mean loss, dloss/dp)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, InvertibilityError, ShapeError

PROB_FLOOR = 1e-12

ROBUST_KINDS = ("unhinged", "sigmoid", "ramp", "savage")
TAGS = ("cross-entropy", *ROBUST_KINDS, "bootstrap-soft", "backward", "forward")


def _check(y, p):
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if y.ndim != 2 or y.shape != p.shape:
        raise ShapeError(f"targets {y.shape} and predictions {p.shape} must be matching matrices")
    return y, p


def _require_onehot(y):
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ContractError("targets must be one-hot rows")


def clamped_log(p):
    return np.log(np.clip(p, PROB_FLOOR, 1.0))


def _clamped_log_grad(p):
    # d log(clip(p))/dp; zero where the clamp is active
    return np.where((p >= PROB_FLOOR) & (p <= 1.0), 1.0 / np.maximum(p, PROB_FLOOR), 0.0)


def _weighted_nll(w, p):
    n = p.shape[0]
    loss = -np.sum(w * clamped_log(p), axis=1).mean()
    return loss, -w * _clamped_log_grad(p) / n


def cross_entropy(y, p):
    """Mean of ``-sum_k y_k log p_k``; ``y`` may be soft (simplex rows)."""
    y, p = _check(y, p)
    return _weighted_nll(y, p)


def cross_entropy_matrix(y, p):
    """Pairwise ``L[i, j] = CE(y_i, p_j)``."""
    return -(np.asarray(y, dtype=np.float64) @ clamped_log(np.asarray(p, dtype=np.float64)).T)


def robust_loss(kind, y, p):
    """Bounded losses of the labelled-class probability ``s = <y, p>``.

    unhinged ``1 - s``; sigmoid ``1 / (1 + exp(4 (2s - 1)))``;
    ramp ``clip(1.5 - 2s, 0, 1)``; savage ``(1 - s)^2``.
    """
    y, p = _check(y, p)
    _require_onehot(y)
    s = np.sum(y * p, axis=1)
    if kind == "unhinged":
        ell, ds = 1.0 - s, -np.ones_like(s)
    elif kind == "sigmoid":
        ell = 1.0 / (1.0 + np.exp(4.0 * (2.0 * s - 1.0)))
        ds = -8.0 * ell * (1.0 - ell)
    elif kind == "ramp":
        raw = 1.5 - 2.0 * s
        ell = np.clip(raw, 0.0, 1.0)
        ds = np.where((raw > 0.0) & (raw < 1.0), -2.0, 0.0)
    elif kind == "savage":
        ell, ds = (1.0 - s) ** 2, -2.0 * (1.0 - s)
    else:
        raise ValueError(f"unknown robust loss {kind!r}")
    n = y.shape[0]
    return float(ell.mean()), ds[:, None] * y / n


def bootstrap_soft(y, p, beta=0.95):
    """``-sum_k (beta y_k + (1 - beta) p_k) log p_k``, averaged.

    The prediction inside the target is differentiated too.
    """
    if not 0.0 < beta <= 1.0:
        raise ContractError(f"bootstrap beta must be in (0, 1], got {beta}")
    y, p = _check(y, p)
    target = beta * y + (1.0 - beta) * p
    loss, grad = _weighted_nll(target, p)
    n = p.shape[0]
    grad = grad - (1.0 - beta) * clamped_log(p) / n
    return loss, grad


def inverse_transition(E, max_cond=1e12):
    E = np.asarray(E, dtype=np.float64)
    cond = np.linalg.cond(E)
    if not np.isfinite(cond) or cond > max_cond:
        raise InvertibilityError(f"transition matrix is not invertible (condition number {cond:.3g})")
    return np.linalg.inv(E)


def corrected_loss(mode, E, y_noisy, p):
    """Loss correction with a known transition matrix ``E[i, j] = P(noisy j | clean i)``.

    forward: cross-entropy of the noisy labels against ``p @ E``.
    backward: per-sample ``sum_i inv(E)[noisy, i] * (-log p_i)``; may be negative.
    """
    y, p = _check(y_noisy, p)
    E = np.asarray(E, dtype=np.float64)
    if E.shape != (y.shape[1], y.shape[1]):
        raise ShapeError(f"transition matrix {E.shape} does not match {y.shape[1]} classes")
    if mode == "forward":
        loss, grad_q = _weighted_nll(y, p @ E)
        return loss, grad_q @ E.T
    if mode == "backward":
        return _weighted_nll(y @ inverse_transition(E), p)
    raise ValueError(f"mode must be 'forward' or 'backward', got {mode!r}")


@dataclass(frozen=True)
class LossKind:
    """A named baseline loss; ``E`` is used by the correction losses only."""

    tag: str
    beta: float = 0.95
    E: np.ndarray | None = None

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ValueError(f"unknown loss tag {self.tag!r}; expected one of {', '.join(TAGS)}")
        if self.tag == "bootstrap-soft" and not 0.0 < self.beta <= 1.0:
            raise ContractError(f"bootstrap beta must be in (0, 1], got {self.beta}")
        if self.tag in ("backward", "forward"):
            if self.E is None:
                raise ContractError(f"{self.tag} correction needs a transition matrix")
            if self.tag == "backward":
                inverse_transition(self.E)

    @property
    def name(self):
        return self.tag

    def __call__(self, y, p):
        if self.tag == "cross-entropy":
            return cross_entropy(y, p)
        if self.tag in ROBUST_KINDS:
            return robust_loss(self.tag, y, p)
        if self.tag == "bootstrap-soft":
            return bootstrap_soft(y, p, self.beta)
        return corrected_loss(self.tag, self.E, y, p)
