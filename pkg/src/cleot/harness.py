"""Experiment runs: method x noise x seed grids and the two-moons walkthrough."""

from __future__ import annotations

import csv
import logging
import os
import tempfile
import threading
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as datamod
from .losses import LossKind, cross_entropy
from .nn import DenseNet, SgdMomentum, mlp
from .noise import FlipSpec, apply_noise, asymmetric_matrix, read_transition_csv, symmetric_matrix
from .objective import CleotConfig, iterative_cleot
from .plotting import plot_accuracy_summary, plot_coupling_graph, plot_decision_boundary
from .training import accuracy, train

log = logging.getLogger(__name__)

RESULT_FIELDS = ["method", "noise", "seed", "test_acc", "epochs", "wall_ms"]
SUMMARY_FIELDS = ["method", "noise", "n", "mean_acc", "std_acc"]


@dataclass(frozen=True)
class RunResult:
    method: str
    noise: float
    seed: int
    test_acc: float
    epochs: int
    wall_ms: int

    def row(self):
        return {"method": self.method, "noise": repr(float(self.noise)), "seed": str(self.seed),
                "test_acc": repr(float(self.test_acc)), "epochs": str(self.epochs), "wall_ms": str(self.wall_ms)}


def seed_streams(seed):
    """Independent generators for data, init, noise, dropout and sampling.

    The noise stream depends only on the seed, so every method sees the same
    corrupted labels.
    """
    data, init, noise, dropout, sampling = np.random.SeedSequence(seed).spawn(5)
    return {name: np.random.default_rng(ss) for name, ss in
            zip(("data", "init", "noise", "dropout", "sampling"), (data, init, noise, dropout, sampling))}


def load_dataset(cfg, rng):
    spec = cfg.dataset
    if spec["kind"] == "two-moons":
        ds = datamod.two_moons(spec["n"], spec["noise_std"], rng)
    else:
        ds = datamod.load_csv(spec["path"])
    return datamod.split(ds, cfg.fractions, rng)


def transition_matrix(cfg, c, level):
    """Simulated corruption matrix at ``level`` (``None`` for clean labels)."""
    if cfg.noise_kind == "none" or level == 0:
        return None
    if cfg.noise_kind == "symmetric":
        return symmetric_matrix(c, level)
    return asymmetric_matrix(c, FlipSpec(cfg.flip_pairs, level))


def build_loss(method, E, c):
    opts = method.options
    if method.kind == "cleot":
        return CleotConfig(alpha=opts.get("alpha", 1.0), beta=opts.get("beta", 0.005), lam=opts.get("lam", 0.005),
                           unroll=opts.get("unroll", 100), mode=opts.get("mode", "unrolled"),
                           max_iter=opts.get("max_iter", 1000))
    if method.kind in ("backward", "forward"):
        if "transition" in opts:
            E = read_transition_csv(opts["transition"])
        return LossKind(method.kind, E=np.eye(c) if E is None else E)
    return LossKind(method.kind, beta=opts.get("beta", 0.95))


def build_sampler(cfg, method):
    opts = method.options
    default_mode = "stratified" if method.kind == "cleot" else cfg.sampler["mode"]
    return datamod.BatchSampler(opts.get("sampler", default_mode),
                                opts.get("batch_size", cfg.sampler["batch_size"]),
                                opts.get("per_class", cfg.sampler["per_class"]))


def run_dir(cfg, method, level, seed):
    return cfg.output_dir / "runs" / method / f"noise-{level:g}" / f"seed-{seed}"


def run_one(cfg, method, level, seed):
    """Train and evaluate one grid cell."""
    start = time.perf_counter()
    rngs = seed_streams(seed)
    ds = load_dataset(cfg, rngs["data"])
    E = transition_matrix(cfg, ds.c, level)
    ds = ds.with_noise(E, rngs["noise"])
    train_view, val_view, test_view = ds.view("train"), ds.view("val"), ds.view("test")
    net = DenseNet(mlp(ds.d, cfg.hidden, ds.c, cfg.dropout, cfg.batchnorm, cfg.l2), rngs["init"])
    opt = SgdMomentum(method.options.get("lr", cfg.lr), method.options.get("momentum", cfg.momentum))
    out = run_dir(cfg, method.name, level, seed)
    out.mkdir(parents=True, exist_ok=True)
    res = train(train_view, val_view, net, build_loss(method, E, ds.c), build_sampler(cfg, method), opt,
                cfg.max_epochs, cfg.patience, rngs["sampling"], dropout_rng=rngs["dropout"],
                evaluate=lambda n: accuracy(n, test_view.x, test_view.y),
                checkpoint=out / "best.clnn")
    write_history(res.history, out / "history.csv")
    acc = accuracy(net, test_view.x, test_view.y)
    return RunResult(method.name, level, seed, acc, res.epochs, int(1000 * (time.perf_counter() - start)))


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "test_acc"])
        w.writeheader()
        for row in history:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


class ResultSink:
    """Results CSV that is rewritten atomically (temp file + rename) on every append."""

    def __init__(self, path):
        self.path = Path(path)
        self.lock = threading.Lock()
        self.rows = read_results(self.path) if self.path.exists() else []

    def done(self):
        return {(r["method"], r["noise"], r["seed"]) for r in self.rows}

    def append(self, row):
        with self.lock:
            self.rows.append(row)
            self._flush()

    def reorder(self, key):
        with self.lock:
            self.rows.sort(key=key)
            self._flush()

    def _flush(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.path.parent, prefix=".results-", suffix=".csv")
        with os.fdopen(fd, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
            w.writeheader()
            w.writerows(self.rows)
        os.replace(tmp, self.path)


def read_results(path):
    with open(path, newline="") as fh:
        return [dict(r) for r in csv.DictReader(fh)]


def aggregate(rows):
    """Mean and population std of ``test_acc`` per (method, noise)."""
    groups = {}
    for r in rows:
        groups.setdefault((r["method"], r["noise"]), []).append(float(r["test_acc"]))
    out = []
    for (method, noise), accs in groups.items():
        a = np.array(accs)
        out.append({"method": method, "noise": noise, "n": str(a.size),
                    "mean_acc": repr(float(a.mean())), "std_acc": repr(float(a.std()))})
    return out


@dataclass
class GridTable:
    raw: list
    summary: list
    failures: list


def run_grid(cfg):
    """Run every (method, noise level, seed) cell not already in ``results.csv``.

    Results are appended as they finish, so an interrupted grid resumes where
    it stopped. Failed cells are logged to ``failures.csv`` and retried on the
    next invocation.
    """
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    sink = ResultSink(cfg.output_dir / "results.csv")
    done = sink.done()
    cells = [(m, lvl, s) for m in cfg.methods for lvl in cfg.noise_levels for s in cfg.seeds]
    todo = [c for c in cells if (c[0].name, repr(float(c[1])), str(c[2])) not in done]
    log.info("%d of %d runs to do", len(todo), len(cells))
    failures = []

    def record(cell, result=None, error=None):
        method, level, seed = cell
        if error is None:
            sink.append(result.row())
            log.info("%s noise=%g seed=%d acc=%.4f", method.name, level, seed, result.test_acc)
        else:
            failures.append({"method": method.name, "noise": repr(float(level)), "seed": str(seed), "error": error})
            log.error("%s noise=%g seed=%d failed: %s", method.name, level, seed, error)

    if cfg.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = {pool.submit(run_one, cfg, *cell): cell for cell in todo}
            for fut in as_completed(futures):
                try:
                    record(futures[fut], fut.result())
                except Exception as exc:  # per-run failures must not stop the grid
                    record(futures[fut], error=f"{type(exc).__name__}: {exc}")
    else:
        for cell in todo:
            try:
                record(cell, run_one(cfg, *cell))
            except Exception as exc:  # per-run failures must not stop the grid
                record(cell, error=f"{type(exc).__name__}: {exc}")

    order = {(m.name, repr(float(lvl)), str(s)): k for k, (m, lvl, s) in enumerate(cells)}
    sink.reorder(lambda r: order.get((r["method"], r["noise"], r["seed"]), len(order)))
    summary = aggregate(sink.rows)
    with open(cfg.output_dir / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        w.writeheader()
        w.writerows(summary)
    fail_path = cfg.output_dir / "failures.csv"
    if failures:
        with open(fail_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["method", "noise", "seed", "error"])
            w.writeheader()
            w.writerows(failures)
    elif fail_path.exists():
        fail_path.unlink()
    if summary:
        plot_accuracy_summary(summary, cfg.output_dir / "accuracy_vs_noise.svg")
    return GridTable(list(sink.rows), summary, failures)


@dataclass
class ToyResult:
    accuracy: list
    out_dir: Path


def run_toy(out_dir, seed=0, n=400, noise_std=0.1, flip=0.2, hidden=(256, 256), initial_epochs=500,
            rounds=3, epochs_per_round=100, lr=0.01, momentum=0.9, batch_size=128,
            alpha=1.0, beta=0.005, lam=0.02, threshold=None, resolution=100, plots=True):
    """Two-moons walkthrough: noisy labels, a plain network, then CLEOT rounds.

    The network is first fitted with cross-entropy on the noisy labels for
    ``initial_epochs``; each round then couples the whole set, propagates
    labels and fine-tunes. Accuracy is measured on the clean labels of the
    same points. Writes ``accuracy.csv`` (round 0 is the initial network) and,
    per round, ``boundary_round<k>.svg``, ``coupling_round<k>.svg`` and
    ``labels_round<k>.csv``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rngs = seed_streams(seed)
    ds = datamod.two_moons(n, noise_std, rngs["data"])
    noisy, _ = apply_noise(ds.labels, symmetric_matrix(2, flip), rngs["noise"])
    x, clean = ds.features, ds.labels
    with open(out / "data.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["f0", "f1", "label", "noisy_label"])
        for row, c, nz in zip(x, clean.argmax(1), noisy.argmax(1)):
            w.writerow([repr(float(row[0])), repr(float(row[1])), int(c), int(nz)])

    net = DenseNet(mlp(2, hidden, 2), rngs["init"])
    opt = SgdMomentum(lr, momentum)
    rng = rngs["sampling"]
    for _ in range(initial_epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            p, tape = net.forward(x[idx], mode="train", rng=rng)
            grads, _ = net.backward(tape, cross_entropy(noisy[idx], p)[1])
            opt.step(net, grads)

    def evaluate(model):
        return accuracy(model, x, clean)

    accs = [evaluate(net)]
    if plots:
        plot_decision_boundary(net, x, noisy, resolution, out / "initial.svg", accs[0], "initial network")
    cfg = CleotConfig(alpha=alpha, beta=beta, lam=lam, mode="detached")
    thr = 0.25 / n**2 if threshold is None else threshold
    for k in range(1, rounds + 1):
        res = iterative_cleot(x, noisy, net, cfg, 1, epochs_per_round, opt, rng, batch_size, evaluate)
        gamma, soft, acc = res.couplings[0], res.labels[0], res.accuracy[0]
        accs.append(acc)
        with open(out / f"labels_round{k}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"p{j}" for j in range(soft.shape[1])])
            w.writerows([[repr(float(v)) for v in row] for row in soft])
        if plots:
            plot_coupling_graph(gamma, x, thr, out / f"coupling_round{k}.svg", labels=noisy, title=f"round {k}: coupling")
            plot_decision_boundary(net, x, soft, resolution, out / f"boundary_round{k}.svg", acc, f"round {k}")
        log.info("round %d accuracy %.4f", k, acc)
    with open(out / "accuracy.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "accuracy"])
        for k, a in enumerate(accs):
            w.writerow([k, repr(a)])
    return ToyResult(accs, out)
