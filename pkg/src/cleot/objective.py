"""Classification loss with entropic optimal transport.

A minibatch ``(x_i, noisy y_i)`` is coupled with its own predictions
``(x_j, f(x_j))`` under the joint cost

    D[i, j] = alpha * ||x_i - x_j||^2 + beta * CE(y_i, f(x_j))

and the network is trained on ``sum_ij gamma[i, j] * CE(y_i, f(x_j))`` where
``gamma`` is the entropic plan for ``D``. Because cross-entropy is linear in
its target, the same objective equals plain cross-entropy on the propagated
labels ``m * gamma.T @ y``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ot
from .errors import ContractError, NumericError, ShapeError
from .losses import _clamped_log_grad, cross_entropy, cross_entropy_matrix

FULL_BATCH_CAP = 2000


@dataclass(frozen=True)
class CleotConfig:
    alpha: float = 1.0
    beta: float = 0.005
    lam: float = 0.005
    unroll: int = 100
    mode: str = "unrolled"
    max_iter: int = 1000

    def __post_init__(self):
        if self.mode not in ("unrolled", "detached"):
            raise ContractError(f"gradient mode must be 'unrolled' or 'detached', got {self.mode!r}")
        if min(self.alpha, self.beta, self.lam) < 0:
            raise ContractError("alpha, beta and lambda must be non-negative")
        if self.lam == 0 and self.mode != "detached":
            raise ContractError("lambda = 0 uses an exact assignment, which is only available in detached mode")
        if self.unroll < 1 or self.max_iter < 1:
            raise ContractError("iteration counts must be >= 1")

    @property
    def name(self):
        return "cleot"


def sq_distances(x):
    diff = x[:, None, :] - x[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def ground_cost(x, y_noisy, p, alpha, beta):
    """Joint feature/label cost between labelled samples (rows) and predictions (columns)."""
    x = np.asarray(x, dtype=np.float64)
    y_noisy = np.asarray(y_noisy, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    m = x.shape[0]
    if y_noisy.shape[0] != m or p.shape[0] != m or y_noisy.shape != p.shape:
        raise ShapeError(f"batch shapes disagree: x {x.shape}, labels {y_noisy.shape}, predictions {p.shape}")
    D = alpha * sq_distances(x) + beta * cross_entropy_matrix(y_noisy, p)
    if not np.all(np.isfinite(D)):
        raise NumericError("ground cost has non-finite entries")
    return D


def solve_coupling(D, cfg):
    """Forward-only plan for ``D`` under ``cfg`` (assignment when lambda is 0)."""
    if cfg.lam == 0:
        return ot.assignment_coupling(D)
    return ot.sinkhorn(D, lam=cfg.lam, max_iter=cfg.max_iter)


@dataclass
class BatchResult:
    loss: float
    grads: dict
    coupling: np.ndarray
    predictions: np.ndarray
    extras: dict = field(default_factory=dict)


def cleot_batch_loss(x, y_noisy, net, cfg, rng=None, mode="train", batch_index=None, need_grad=True):
    """Minibatch objective ``sum_ij gamma_ij CE(y_i, f(x_j))`` and its parameter gradients.

    In ``unrolled`` mode the gradient includes the path through the Sinkhorn
    iterations (the plan depends on the predictions via the label cost); in
    ``detached`` mode the plan is held fixed. Parameter gradients include the
    network's weight decay; the returned loss does not.
    """
    try:
        p, tape = net.forward(x, mode=mode, rng=rng)
        y_noisy = np.asarray(y_noisy, dtype=np.float64)
        L = cross_entropy_matrix(y_noisy, p)
        D = ground_cost(x, y_noisy, p, cfg.alpha, cfg.beta)
        stape = None
        if cfg.lam == 0:
            gamma = ot.assignment_coupling(D).matrix
        elif cfg.mode == "unrolled" and need_grad:
            coupling, stape = ot.sinkhorn_unrolled(D, lam=cfg.lam, n_iter=cfg.unroll)
            gamma = coupling.matrix
        else:
            gamma = ot.sinkhorn(D, lam=cfg.lam, max_iter=cfg.max_iter).matrix
        loss = float(np.sum(gamma * L))
        if not need_grad:
            return BatchResult(loss, {}, gamma, p)
        dL = gamma
        if stape is not None and cfg.beta != 0:
            dL = dL + cfg.beta * ot.sinkhorn_backward(stape, L)
        dp = -(dL.T @ y_noisy) * _clamped_log_grad(p)
        grads, _ = net.backward(tape, dp)
    except NumericError as exc:
        if batch_index is None:
            raise
        raise NumericError(f"batch {batch_index}: {exc}") from exc
    return BatchResult(loss, grads, gamma, p)


def propagate_labels(gamma, y_noisy, atol=1e-6):
    """Coupling-weighted label averages ``m * gamma.T @ y``, one simplex row per column."""
    gamma = np.asarray(gamma, dtype=np.float64)
    y_noisy = np.asarray(y_noisy, dtype=np.float64)
    m = gamma.shape[1]
    if gamma.shape[0] != y_noisy.shape[0]:
        raise ShapeError(f"coupling {gamma.shape} does not match {y_noisy.shape[0]} labels")
    col = gamma.sum(axis=0)
    if np.max(np.abs(m * col - 1.0)) > atol:
        raise ContractError("label propagation needs uniform 1/m column marginals")
    return m * (gamma.T @ y_noisy)


@dataclass
class IterativeResult:
    net: object
    labels: list
    couplings: list
    accuracy: list


def iterative_cleot(x, y_noisy, net, cfg, rounds, epochs_per_round, opt, rng,
                    batch_size=128, evaluate=None):
    """Full-batch rounds of couple -> propagate -> fine-tune.

    Each round solves the plan on the whole set with the current predictions,
    replaces the noisy labels by their propagated (soft) version, and
    fine-tunes ``net`` with cross-entropy on those for ``epochs_per_round``
    epochs. ``evaluate(net)`` is called after every round; its results only
    feed ``accuracy``.
    """
    x = np.asarray(x, dtype=np.float64)
    y_noisy = np.asarray(y_noisy, dtype=np.float64)
    n = x.shape[0]
    if n > FULL_BATCH_CAP:
        raise ContractError(f"{n} samples exceed the full-batch cap of {FULL_BATCH_CAP}; use cleot_batch_loss on minibatches")
    result = IterativeResult(net, [], [], [])
    for _ in range(rounds):
        p = net.predict(x)
        D = ground_cost(x, y_noisy, p, cfg.alpha, cfg.beta)
        gamma = solve_coupling(D, cfg).matrix
        soft = propagate_labels(gamma, y_noisy)
        for _ in range(epochs_per_round):
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                probs, tape = net.forward(x[idx], mode="train", rng=rng)
                _, gp = cross_entropy(soft[idx], probs)
                grads, _ = net.backward(tape, gp)
                opt.step(net, grads)
        result.couplings.append(gamma)
        result.labels.append(soft)
        if evaluate is not None:
            result.accuracy.append(evaluate(net))
    return result
