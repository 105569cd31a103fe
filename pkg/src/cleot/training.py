"""Minibatch training with validation-based early stopping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .losses import LossKind
from .nn import save_params
from .objective import CleotConfig, cleot_batch_loss

log = logging.getLogger(__name__)


def accuracy(net, x, y):
    return float(np.mean(net.predict(x).argmax(axis=1) == np.asarray(y).argmax(axis=1)))


def batch_step(net, loss, x, y, rng, batch_index=None):
    """Train-mode loss and gradients for one batch."""
    if isinstance(loss, CleotConfig):
        res = cleot_batch_loss(x, y, net, loss, rng=rng, batch_index=batch_index)
        return res.loss, res.grads
    p, tape = net.forward(x, mode="train", rng=rng)
    value, gp = loss(y, p)
    grads, _ = net.backward(tape, gp)
    return value, grads


def validation_loss(net, loss, view, chunk=256):
    """Eval-mode value of the training objective on ``view``.

    For the transport objective the set is cut into consecutive chunks of at
    most ``chunk`` rows, each coupled on its own; chunk losses are averaged
    with size weights.
    """
    if isinstance(loss, CleotConfig):
        total = 0.0
        for start in range(0, len(view), chunk):
            xb, yb = view.x[start:start + chunk], view.y[start:start + chunk]
            total += xb.shape[0] * cleot_batch_loss(xb, yb, net, loss, mode="eval", need_grad=False).loss
        return total / len(view)
    return loss(view.y, net.predict(view.x))[0]


@dataclass
class TrainResult:
    net: object
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = np.inf

    @property
    def epochs(self):
        return len(self.history)


def train(train_view, val_view, net, loss, sampler, opt, max_epochs, patience, rng,
          dropout_rng=None, evaluate=None, checkpoint=None):
    """Fit ``net`` on ``train_view`` and keep the weights with the lowest validation loss.

    ``loss`` is a ``LossKind`` or a ``CleotConfig``. Training stops after
    ``max_epochs`` or once ``patience`` epochs in a row (counted from the
    second epoch on) fail to improve the validation loss; ``patience=0``
    therefore always runs two epochs. ``evaluate(net)`` (e.g. clean test
    accuracy) is recorded in the history and never influences training.
    """
    if not isinstance(loss, (LossKind, CleotConfig)):
        raise TypeError(f"unsupported loss {loss!r}")
    dropout_rng = rng if dropout_rng is None else dropout_rng
    result = TrainResult(net)
    best_state = net.state()
    wait = 0
    for epoch in range(1, max_epochs + 1):
        total, count = 0.0, 0
        for b, idx in enumerate(sampler.epoch(train_view, rng)):
            xb, yb = train_view.x[idx], train_view.y[idx]
            value, grads = batch_step(net, loss, xb, yb, dropout_rng, batch_index=b)
            opt.step(net, grads)
            total += value * idx.size
            count += idx.size
        val = validation_loss(net, loss, val_view)
        row = {"epoch": epoch, "train_loss": total / count, "val_loss": val,
               "test_acc": evaluate(net) if evaluate is not None else float("nan")}
        result.history.append(row)
        if val < result.best_val:
            result.best_val, result.best_epoch = val, epoch
            best_state = net.state()
            if checkpoint is not None:
                save_params(net, checkpoint)
            wait = 0
        elif epoch > 1:
            wait += 1
        log.debug("epoch %d train %.5f val %.5f", epoch, row["train_loss"], val)
        if epoch > 1 and wait >= patience:
            break
    net.load_state(best_state)
    return result
