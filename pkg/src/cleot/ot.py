"""Entropic optimal transport between discrete measures.

The solver works on dual potentials in the log domain so that small
regularization on squared-distance costs does not underflow. Two entry points:

* ``sinkhorn`` iterates to a marginal tolerance (forward use only);
* ``sinkhorn_unrolled`` runs a fixed number of iterations and returns a tape
  that ``sinkhorn_backward`` differentiates exactly (for the truncated map).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import NumericError, ShapeError, StateError


def uniform(n):
    return np.full(n, 1.0 / n)


def check_measure(w, name="weights"):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ShapeError(f"{name} must be a non-empty vector")
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise ValueError(f"{name} must be strictly positive and finite")
    if abs(w.sum() - 1.0) > 1e-12:
        raise ValueError(f"{name} must sum to 1 (got {w.sum():.17g})")
    return w


def check_cost(cost):
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeError(f"cost must be a matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise NumericError("cost matrix has non-finite entries")
    if np.any(cost < 0):
        raise ValueError("cost matrix must be non-negative")
    return cost


def _prepare(cost, a, b):
    cost = check_cost(cost)
    n1, n2 = cost.shape
    a = uniform(n1) if a is None else check_measure(a, "a")
    b = uniform(n2) if b is None else check_measure(b, "b")
    if a.size != n1 or b.size != n2:
        raise ShapeError(f"marginals {a.size}, {b.size} do not match cost {cost.shape}")
    return cost, a, b


def _lse(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


@dataclass(frozen=True)
class SinkhornConfig:
    lam: float
    max_iter: int = 1000
    tol: float = 1e-9
    unroll: int = 100

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.max_iter < 1 or self.unroll < 1:
            raise ValueError("iteration counts must be >= 1")
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")


@dataclass
class Coupling:
    """Transport plan plus solver diagnostics.

    ``value`` is the linear transport cost ``<gamma, C>`` without the entropy
    term; ``marginal_error`` is the larger of the row and column sup-norm
    violations.
    """

    matrix: np.ndarray
    value: float
    marginal_error: float
    n_iter: int
    converged: bool

    @property
    def T(self):
        return self.matrix.T

    def entropy(self):
        return entropy(self.matrix)

    def to_csv(self, path, threshold=0.0):
        write_coupling_csv(self.matrix, path, threshold)


def entropy(gamma):
    g = gamma[gamma > 0]
    return float(-np.sum(g * np.log(g)))


def marginal_error(gamma, a, b):
    return float(max(np.max(np.abs(gamma.sum(axis=1) - a)), np.max(np.abs(gamma.sum(axis=0) - b))))


def sinkhorn(cost, a=None, b=None, lam=None, cfg=None, max_iter=1000, tol=1e-9, newton_steps=50):
    """Entropic OT plan minimizing ``<gamma, C> + lam * sum gamma log gamma``.

    Iterates until the marginal violation drops below ``tol`` or ``max_iter``
    iterations; a run that hits the cap is returned with ``converged=False``.
    If the iterations stall above ``tol``, up to ``newton_steps`` damped Newton
    steps on the same dual finish the job. ``a``/``b`` default to uniform
    weights.
    """
    if cfg is not None:
        lam, max_iter, tol = cfg.lam, cfg.max_iter, cfg.tol
    if lam is None or not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    cost, a, b = _prepare(cost, a, b)
    M = -cost / lam
    log_a, log_b = np.log(a), np.log(b)
    f = np.zeros(cost.shape[0])
    err = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        g = log_b - _lse(M + f[:, None], axis=0)
        f = log_a - _lse(M + g[None, :], axis=1)
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
            raise NumericError(f"Sinkhorn potentials became non-finite at iteration {it}")
        # rows are exact after the f-update; only the columns drift
        if it % 10 == 0 or it == max_iter:
            gamma = np.exp(M + f[:, None] + g[None, :])
            err = marginal_error(gamma, a, b)
            if err < tol:
                break
    gamma = np.exp(M + f[:, None] + g[None, :])
    err = marginal_error(gamma, a, b)
    if err >= tol and newton_steps:
        f, g, steps = _newton_polish(M, f, g, a, b, tol, newton_steps)
        it += steps
        gamma = np.exp(M + f[:, None] + g[None, :])
        err = marginal_error(gamma, a, b)
    return Coupling(gamma, float(np.sum(gamma * cost)), err, it, err < tol)


def _newton_polish(M, f, g, a, b, tol, max_steps):
    """Damped Newton ascent on the log-domain dual, started from Sinkhorn potentials.

    Small lambda makes Sinkhorn contract very slowly near sparse plans; a few
    Newton steps reach the marginal tolerance. The Hessian is singular along
    the ``(f + t, g - t)`` direction and nearly singular when the plan is close
    to a permutation, hence the small ridge.
    """
    n1 = M.shape[0]
    ridge = 1e-9 * min(a.min(), b.min())

    def dual(f, g):
        with np.errstate(over="ignore"):
            return f @ a + g @ b - np.sum(np.exp(M + f[:, None] + g[None, :]))

    step = 0
    for step in range(1, max_steps + 1):
        gamma = np.exp(M + f[:, None] + g[None, :])
        r, c = gamma.sum(axis=1), gamma.sum(axis=0)
        grad = np.concatenate([a - r, b - c])
        if np.max(np.abs(grad)) < tol:
            return f, g, step - 1
        H = np.block([[np.diag(r), gamma], [gamma.T, np.diag(c)]])
        H[np.diag_indices_from(H)] += ridge
        try:
            d = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(d)):
            break
        base, slope = dual(f, g), grad @ d
        t = 1.0
        while t > 1e-12:
            trial = dual(f + t * d[:n1], g + t * d[n1:])
            if np.isfinite(trial) and trial >= base + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            break
        f, g = f + t * d[:n1], g + t * d[n1:]
    return f, g, step


def _lse_softmax(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    total = np.sum(e, axis=axis, keepdims=True)
    return np.squeeze(m + np.log(total), axis=axis), e / total


@dataclass
class SinkhornTape:
    """Per-iteration softmax weights of the two half-updates.

    ``cols[t]`` normalizes over rows (the g-update), ``rows[t]`` over columns
    (the f-update); they are the Jacobians the reverse pass needs.
    """

    lam: float
    shape: tuple
    cols: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    gamma: np.ndarray | None = None


def sinkhorn_unrolled(cost, a=None, b=None, lam=1.0, n_iter=100):
    """Run exactly ``n_iter`` log-domain iterations, recording them for ``sinkhorn_backward``.

    Returns ``(Coupling, SinkhornTape)``; ``converged`` reports whether the
    truncated plan meets the default marginal tolerance.
    """
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    cost, a, b = _prepare(cost, a, b)
    M = -cost / lam
    log_a, log_b = np.log(a), np.log(b)
    tape = SinkhornTape(lam, cost.shape)
    f = np.zeros(cost.shape[0])
    for it in range(n_iter):
        lse_i, Q = _lse_softmax(M + f[:, None], axis=0)
        g = log_b - lse_i
        lse_j, P = _lse_softmax(M + g[None, :], axis=1)
        f = log_a - lse_j
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
            raise NumericError(f"Sinkhorn potentials became non-finite at iteration {it + 1}")
        tape.cols.append(Q)
        tape.rows.append(P)
    gamma = a[:, None] * P
    tape.gamma = gamma
    err = marginal_error(gamma, a, b)
    return Coupling(gamma, float(np.sum(gamma * cost)), err, n_iter, err < 1e-9), tape


def sinkhorn_backward(tape, grad_gamma):
    """Gradient w.r.t. the cost matrix of a scalar ``L(gamma)``.

    Reverse accumulation through the recorded iterations: exact for the
    truncated iteration map, not for the converged fixed point.
    """
    if not isinstance(tape, SinkhornTape) or tape.gamma is None or not tape.rows:
        raise StateError("sinkhorn_backward needs a tape from sinkhorn_unrolled")
    G = np.asarray(grad_gamma, dtype=np.float64)
    if G.shape != tuple(tape.shape) or len(tape.rows) != len(tape.cols):
        raise StateError(f"upstream gradient {G.shape} does not match tape {tape.shape}")
    Gg = G * tape.gamma
    dM = Gg.copy()
    df = Gg.sum(axis=1)
    dg = Gg.sum(axis=0)
    for t in range(len(tape.rows) - 1, -1, -1):
        # f_t = log_a - lse_j(M + g_t)
        dP = -df[:, None] * tape.rows[t]
        dM += dP
        dg = dg + dP.sum(axis=0)
        # g_t = log_b - lse_i(M + f_{t-1})
        dQ = -dg[None, :] * tape.cols[t]
        dM += dQ
        df = dQ.sum(axis=1)
        dg = 0.0
    return -dM / tape.lam


def exact_assignment(cost):
    """Minimum-cost perfect matching of a square cost matrix.

    Returns ``(perm, total)`` where row ``i`` is matched to column ``perm[i]``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ShapeError(f"assignment needs a square matrix, got {cost.shape}")
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(cost.shape[0], dtype=np.int64)
    perm[rows] = cols
    return perm, float(cost[rows, cols].sum())


def assignment_coupling(cost):
    """The lambda = 0 plan: a permutation matrix scaled by 1/n."""
    perm, total = exact_assignment(cost)
    n = perm.size
    gamma = np.zeros((n, n))
    gamma[np.arange(n), perm] = 1.0 / n
    return Coupling(gamma, total / n, 0.0, 0, True)


def write_coupling_csv(gamma, path, threshold=0.0):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "mass"])
        for i, j in zip(*np.nonzero(gamma > threshold)):
            w.writerow([int(i), int(j), repr(float(gamma[i, j]))])
