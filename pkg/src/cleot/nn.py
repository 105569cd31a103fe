"""Small feed-forward classifiers with hand-written reverse-mode gradients.

Everything is float64 numpy. A network is an ordered list of layer specs;
``DenseNet.forward`` records what each layer needs on a ``GradientTape`` and
``DenseNet.backward`` walks the tape in reverse.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError, StateError

MAGIC = b"CLNN"


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int
    l2: float = 0.0


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Dropout:
    p: float = 0.5


@dataclass(frozen=True)
class BatchNorm:
    momentum: float = 0.9
    epsilon: float = 1e-5


@dataclass(frozen=True)
class Softmax:
    pass


def mlp(in_dim, hidden, out_dim, dropout=0.0, batchnorm=False, l2=0.0):
    """Layer list for a ReLU MLP ending in (optional batchnorm +) softmax.

    ``dropout`` > 0 inserts a dropout layer before the last dense layer.
    """
    layers = []
    d = in_dim
    for h in hidden:
        layers += [Dense(d, h, l2), ReLU()]
        d = h
    if dropout > 0:
        layers.append(Dropout(dropout))
    layers.append(Dense(d, out_dim, l2))
    if batchnorm:
        layers.append(BatchNorm())
    layers.append(Softmax())
    return layers


def _validate(layers):
    if not layers or not isinstance(layers[-1], Softmax):
        raise ShapeError("the last layer must be Softmax")
    if sum(isinstance(l, Softmax) for l in layers) != 1:
        raise ShapeError("Softmax must appear exactly once")
    width = None
    for i, layer in enumerate(layers):
        if isinstance(layer, Dense):
            if width is not None and layer.in_dim != width:
                raise ShapeError(f"layer {i}: expects {layer.in_dim} inputs, previous layer gives {width}")
            width = layer.out_dim
        elif isinstance(layer, Dropout):
            if not 0.0 <= layer.p < 1.0:
                raise ValueError(f"layer {i}: dropout p must be in [0, 1), got {layer.p}")
        elif isinstance(layer, BatchNorm):
            if layer.epsilon <= 0:
                raise ValueError(f"layer {i}: batchnorm epsilon must be positive")
            if width is None:
                raise ShapeError(f"layer {i}: batchnorm needs a preceding dense layer")
    if width is None:
        raise ShapeError("network has no dense layer")


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class GradientTape:
    """Forward intermediates of one ``forward`` call."""

    net: "DenseNet"
    mode: str
    x_shape: tuple
    caches: list = field(default_factory=list)
    output: np.ndarray | None = None


class DenseNet:
    """Feed-forward classifier ``x -> class probabilities``.

    Parameters live in ``self.params`` keyed ``"<layer>.<name>"``
    (``W``, ``b`` for dense layers, ``gamma``, ``beta`` for batchnorm);
    batchnorm running statistics live in ``self.buffers``.
    """

    def __init__(self, layers, rng=None):
        layers = list(layers)
        _validate(layers)
        self.layers = layers
        self.mode = "eval"
        self.params = {}
        self.buffers = {}
        rng = np.random.default_rng(rng)
        width = None
        for i, layer in enumerate(layers):
            if isinstance(layer, Dense):
                limit = np.sqrt(6.0 / (layer.in_dim + layer.out_dim))
                self.params[f"{i}.W"] = rng.uniform(-limit, limit, (layer.in_dim, layer.out_dim))
                self.params[f"{i}.b"] = np.zeros(layer.out_dim)
                width = layer.out_dim
            elif isinstance(layer, BatchNorm):
                self.params[f"{i}.gamma"] = np.ones(width)
                self.params[f"{i}.beta"] = np.zeros(width)
                self.buffers[f"{i}.mean"] = np.zeros(width)
                self.buffers[f"{i}.var"] = np.ones(width)

    @property
    def in_dim(self):
        return next(l.in_dim for l in self.layers if isinstance(l, Dense))

    @property
    def out_dim(self):
        return [l for l in self.layers if isinstance(l, Dense)][-1].out_dim

    @property
    def stochastic(self):
        return any(isinstance(l, Dropout) and l.p > 0 for l in self.layers)

    def state(self):
        """Copy of all parameters and buffers (for checkpointing)."""
        out = {k: v.copy() for k, v in self.params.items()}
        out.update({k: v.copy() for k, v in self.buffers.items()})
        return out

    def load_state(self, state):
        for k in self.params:
            self.params[k] = state[k].copy()
        for k in self.buffers:
            self.buffers[k] = state[k].copy()

    def l2_penalty(self):
        """Weight-decay term ``sum_l l2_l * ||W_l||^2`` whose gradient ``backward`` adds."""
        total = 0.0
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense) and layer.l2:
                total += layer.l2 * float(np.sum(self.params[f"{i}.W"] ** 2))
        return total

    def predict(self, x):
        return self.forward(x, mode="eval")[0]

    def forward(self, x, mode="eval", rng=None):
        """Return ``(probabilities, tape)``.

        In train mode batchnorm uses batch statistics (and updates its running
        averages) and dropout draws masks from ``rng``.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"expected input of shape (n, {self.in_dim}), got {x.shape}")
        train = mode == "train"
        if train and self.stochastic and rng is None:
            raise ValueError("train-mode forward through dropout needs an rng")
        self.mode = mode
        tape = GradientTape(self, mode, x.shape)
        h = x
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                tape.caches.append(h)
                h = h @ self.params[f"{i}.W"] + self.params[f"{i}.b"]
            elif isinstance(layer, ReLU):
                mask = h > 0
                tape.caches.append(mask)
                h = h * mask
            elif isinstance(layer, Dropout):
                if train and layer.p > 0:
                    keep = (rng.random(h.shape) >= layer.p) / (1.0 - layer.p)
                    tape.caches.append(keep)
                    h = h * keep
                else:
                    tape.caches.append(None)
            elif isinstance(layer, BatchNorm):
                if train:
                    mu = h.mean(axis=0)
                    var = h.var(axis=0)
                    m = layer.momentum
                    self.buffers[f"{i}.mean"] = m * self.buffers[f"{i}.mean"] + (1 - m) * mu
                    self.buffers[f"{i}.var"] = m * self.buffers[f"{i}.var"] + (1 - m) * var
                else:
                    mu = self.buffers[f"{i}.mean"]
                    var = self.buffers[f"{i}.var"]
                inv_std = 1.0 / np.sqrt(var + layer.epsilon)
                xhat = (h - mu) * inv_std
                tape.caches.append((xhat, inv_std, train))
                h = self.params[f"{i}.gamma"] * xhat + self.params[f"{i}.beta"]
            elif isinstance(layer, Softmax):
                h = softmax(h)
                tape.caches.append(h)
            if not np.all(np.isfinite(h)):
                raise NumericError(f"non-finite activations after layer {i} ({type(layer).__name__})")
        tape.output = h
        return h, tape

    def backward(self, tape, output_grad):
        """Gradients of a scalar loss given ``dL/d(probabilities)``.

        Returns ``(param_grads, input_grad)``. Weight-decay gradients
        ``2 * l2 * W`` are included.
        """
        if tape is None or not isinstance(tape, GradientTape) or tape.net is not self:
            raise StateError("backward needs the tape returned by this network's forward pass")
        g = np.asarray(output_grad, dtype=np.float64)
        if g.shape != tape.output.shape:
            raise ShapeError(f"output gradient has shape {g.shape}, forward output was {tape.output.shape}")
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            cache = tape.caches[i]
            if isinstance(layer, Softmax):
                p = cache
                g = p * (g - np.sum(g * p, axis=1, keepdims=True))
            elif isinstance(layer, BatchNorm):
                xhat, inv_std, batch_stats = cache
                gamma = self.params[f"{i}.gamma"]
                grads[f"{i}.gamma"] = np.sum(g * xhat, axis=0)
                grads[f"{i}.beta"] = np.sum(g, axis=0)
                gx = g * gamma
                if batch_stats:
                    n = gx.shape[0]
                    g = inv_std / n * (n * gx - gx.sum(axis=0) - xhat * np.sum(gx * xhat, axis=0))
                else:
                    g = gx * inv_std
            elif isinstance(layer, Dropout):
                if cache is not None:
                    g = g * cache
            elif isinstance(layer, ReLU):
                g = g * cache
            elif isinstance(layer, Dense):
                W = self.params[f"{i}.W"]
                grads[f"{i}.W"] = cache.T @ g + 2.0 * layer.l2 * W
                grads[f"{i}.b"] = g.sum(axis=0)
                g = g @ W.T
        return grads, g


class SgdMomentum:
    """Classic momentum: ``v <- m v - lr g``; ``theta <- theta + v``."""

    def __init__(self, lr=0.01, momentum=0.9):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        self.lr = lr
        self.momentum = momentum
        self.velocity = {}

    def step(self, net, grads):
        for k, theta in net.params.items():
            g = grads[k]
            if g.shape != theta.shape:
                raise ShapeError(f"gradient for {k} has shape {g.shape}, parameter is {theta.shape}")
            v = self.velocity.get(k)
            if v is None:
                v = np.zeros_like(theta)
            v = self.momentum * v - self.lr * g
            self.velocity[k] = v
            net.params[k] = theta + v
        return net


def save_params(net, path):
    """Write parameters and buffers in the CLNN checkpoint format.

    Layout (little-endian): ``b"CLNN"``, uint64 tensor count, then per tensor
    a uint64 name length, the UTF-8 name, uint64 ndim and uint64 dims; after
    the header, every tensor's float64 values in header order.
    """
    state = net.state()
    header = [MAGIC, struct.pack("<Q", len(state))]
    for name, arr in state.items():
        raw = name.encode()
        header.append(struct.pack("<Q", len(raw)) + raw)
        header.append(struct.pack("<Q", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
    with open(path, "wb") as fh:
        fh.write(b"".join(header))
        for arr in state.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path):
    """Tensors of a CLNN file as an ordered ``name -> array`` dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a CLNN checkpoint")
    pos = 4
    (count,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    shapes = []
    for _ in range(count):
        (n,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        name = blob[pos:pos + n].decode()
        pos += n
        (ndim,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        dims = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        shapes.append((name, dims))
    state = {}
    for name, dims in shapes:
        size = int(np.prod(dims, dtype=np.int64))
        state[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * size
    if pos != len(blob):
        raise ValueError(f"{path}: trailing or missing data")
    return state


def load_params(net, path):
    state = read_checkpoint(path)
    for k, v in net.state().items():
        if k not in state or state[k].shape != v.shape:
            raise ShapeError(f"{path}: checkpoint does not match network at {k}")
    net.load_state(state)
    return net


def net_from_checkpoint(path):
    """Rebuild a ReLU MLP (as made by ``mlp``) from its checkpoint alone.

    Dropout layers are not recorded; they do not affect eval-mode output.
    """
    state = read_checkpoint(path)
    ids = sorted({int(k.split(".")[0]) for k in state})
    layers, rename = [], {}
    for i in ids:
        if f"{i}.W" in state:
            if layers:
                layers.append(ReLU())
            rename[i] = len(layers)
            layers.append(Dense(*state[f"{i}.W"].shape))
        elif f"{i}.gamma" in state:
            rename[i] = len(layers)
            layers.append(BatchNorm())
    layers.append(Softmax())
    net = DenseNet(layers)
    net.load_state({f"{rename[int(k.split('.')[0])]}.{k.split('.', 1)[1]}": v for k, v in state.items()})
    return net
