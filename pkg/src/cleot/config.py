"""INI-style experiment configuration.

Example::

    [dataset]
    kind = two-moons        ; or: csv (with path = ...)
    n = 1000
    noise_std = 0.1

    [split]
    fractions = 0.8, 0.1, 0.1

    [noise]
    kind = symmetric        ; none | symmetric | asymmetric
    levels = 0.0, 0.2, 0.4  ; one grid axis value per p_e
    pairs = 0->1, 1<->2     ; asymmetric only

    [methods]
    list = cross-entropy, cleot

    [method:cleot]          ; optional per-method overrides
    kind = cleot
    alpha = 1
    beta = 0.005
    lam = 0.05
    lr = 0.1
    sampler = stratified
    per_class = 50

    [net]
    hidden = 256, 256
    dropout = 0
    batchnorm = false
    l2 = 0

    [optimizer]
    lr = 0.01
    momentum = 0.9

    [sampler]
    mode = plain
    batch_size = 128
    per_class = 50

    [train]
    max_epochs = 200
    patience = 25
    seeds = 0, 1, 2, 3, 4
    workers = 1

    [output]
    dir = results

Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .losses import TAGS
from .noise import FlipSpec

METHOD_KEYS = {
    "kind", "alpha", "beta", "lam", "mode", "unroll", "max_iter", "lr", "momentum",
    "sampler", "batch_size", "per_class", "transition",
}


@dataclass(frozen=True)
class MethodSpec:
    name: str
    kind: str
    options: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: dict
    fractions: tuple
    noise_kind: str
    noise_levels: tuple
    flip_pairs: tuple
    methods: tuple
    hidden: tuple
    dropout: float
    batchnorm: bool
    l2: float
    lr: float
    momentum: float
    sampler: dict
    max_epochs: int
    patience: int
    seeds: tuple
    workers: int
    output_dir: Path
    source: Path | None = None


def _floats(text, path):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(path, f"expected comma-separated numbers, got {text!r}") from None


def _ints(text, path):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(path, f"expected comma-separated integers, got {text!r}") from None


def _get(cp, section, key, cast, default=None, required=False):
    path = f"{section}.{key}"
    if not cp.has_option(section, key):
        if required:
            raise ConfigError(path, "missing")
        return default
    raw = cp.get(section, key).strip()
    try:
        if cast is bool:
            return cp.getboolean(section, key)
        return cast(raw)
    except ValueError:
        raise ConfigError(path, f"cannot parse {raw!r} as {cast.__name__}") from None


def parse_config(text, base_dir=None):
    """Parse config text; file references are resolved against ``base_dir``."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("<file>", str(exc).splitlines()[0]) from None
    base = Path(base_dir) if base_dir is not None else Path.cwd()

    kind = _get(cp, "dataset", "kind", str, "two-moons")
    if kind == "two-moons":
        dataset = {"kind": kind, "n": _get(cp, "dataset", "n", int, 400),
                   "noise_std": _get(cp, "dataset", "noise_std", float, 0.1)}
        if dataset["n"] < 2 or dataset["n"] % 2:
            raise ConfigError("dataset.n", "two moons needs an even count >= 2")
    elif kind == "csv":
        p = _get(cp, "dataset", "path", str, required=True)
        p = (base / p).resolve()
        if not p.exists():
            raise ConfigError("dataset.path", f"file not found: {p}")
        dataset = {"kind": kind, "path": p}
    else:
        raise ConfigError("dataset.kind", f"unknown dataset kind {kind!r}")

    fractions = _floats(_get(cp, "split", "fractions", str, "0.8, 0.1, 0.1"), "split.fractions")
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1) > 1e-9:
        raise ConfigError("split.fractions", "need three non-negative fractions summing to 1")

    noise_kind = _get(cp, "noise", "kind", str, "none")
    if noise_kind not in ("none", "symmetric", "asymmetric"):
        raise ConfigError("noise.kind", f"unknown noise kind {noise_kind!r}")
    levels = (0.0,) if noise_kind == "none" else _floats(_get(cp, "noise", "levels", str, required=True), "noise.levels")
    if not levels or any(not 0 <= p < 1 for p in levels):
        raise ConfigError("noise.levels", "noise levels must lie in [0, 1)")
    pairs = ()
    if noise_kind == "asymmetric":
        items = [s for s in _get(cp, "noise", "pairs", str, required=True).split(",") if s.strip()]
        try:
            pairs = FlipSpec.parse(items, 0.0).pairs
        except ValueError as exc:
            raise ConfigError("noise.pairs", str(exc)) from None

    names = [s.strip() for s in _get(cp, "methods", "list", str, required=True).split(",") if s.strip()]
    if not names:
        raise ConfigError("methods.list", "at least one method is required")
    methods = []
    for name in names:
        section = f"method:{name}"
        options = dict(cp.items(section)) if cp.has_section(section) else {}
        unknown = set(options) - METHOD_KEYS
        if unknown:
            raise ConfigError(f"{section}.{sorted(unknown)[0]}", "unknown key")
        mkind = options.pop("kind", name)
        if mkind != "cleot" and mkind not in TAGS:
            raise ConfigError(f"{section}.kind" if cp.has_section(section) else "methods.list",
                              f"unknown method {mkind!r}")
        for key in ("alpha", "beta", "lam", "lr", "momentum"):
            if key in options:
                options[key] = _get(cp, section, key, float)
        for key in ("unroll", "max_iter", "batch_size", "per_class"):
            if key in options:
                options[key] = _get(cp, section, key, int)
        if "transition" in options:
            tp = (base / options["transition"]).resolve()
            if not tp.exists():
                raise ConfigError(f"{section}.transition", f"file not found: {tp}")
            options["transition"] = tp
        if "mode" in options and options["mode"] not in ("unrolled", "detached"):
            raise ConfigError(f"{section}.mode", "expected 'unrolled' or 'detached'")
        if "sampler" in options and options["sampler"] not in ("plain", "stratified"):
            raise ConfigError(f"{section}.sampler", "expected 'plain' or 'stratified'")
        methods.append(MethodSpec(name, mkind, options))
    if len(set(names)) != len(names):
        raise ConfigError("methods.list", "method names must be unique")

    hidden = _ints(_get(cp, "net", "hidden", str, "256, 256"), "net.hidden")
    dropout = _get(cp, "net", "dropout", float, 0.0)
    if not 0 <= dropout < 1:
        raise ConfigError("net.dropout", "must be in [0, 1)")
    sampler = {"mode": _get(cp, "sampler", "mode", str, "plain"),
               "batch_size": _get(cp, "sampler", "batch_size", int, 128),
               "per_class": _get(cp, "sampler", "per_class", int, 50)}
    if sampler["mode"] not in ("plain", "stratified"):
        raise ConfigError("sampler.mode", "expected 'plain' or 'stratified'")
    seeds = _ints(_get(cp, "train", "seeds", str, "0"), "train.seeds")
    if not seeds:
        raise ConfigError("train.seeds", "at least one seed is required")
    lr = _get(cp, "optimizer", "lr", float, 0.01)
    if lr < 0:
        raise ConfigError("optimizer.lr", "must be non-negative")
    out = Path(_get(cp, "output", "dir", str, "results"))
    return ExperimentConfig(
        dataset=dataset,
        fractions=fractions,
        noise_kind=noise_kind,
        noise_levels=levels,
        flip_pairs=pairs,
        methods=tuple(methods),
        hidden=hidden,
        dropout=dropout,
        batchnorm=_get(cp, "net", "batchnorm", bool, False),
        l2=_get(cp, "net", "l2", float, 0.0),
        lr=lr,
        momentum=_get(cp, "optimizer", "momentum", float, 0.9),
        sampler=sampler,
        max_epochs=_get(cp, "train", "max_epochs", int, 200),
        patience=_get(cp, "train", "patience", int, 25),
        seeds=seeds,
        workers=_get(cp, "train", "workers", int, 1),
        output_dir=out if out.is_absolute() else (base / out).resolve(),
    )


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError("<file>", f"config file not found: {path}")
    cfg = parse_config(path.read_text(), base_dir=path.parent)
    return cfg.__class__(**{**cfg.__dict__, "source": path})
