"""Command line experiments: config parsing, recipes, reports and run manifests.

Usage: lpk <command> --config FILE [--seed N] [--out DIR] [--dry-run]

Config files are flat `key = value` lines. Keys outside any block (kind,
seed, out) are top level; all others are dotted, `block.key = value`.
`#` starts a comment. Lists are comma separated. The only environment
variable read is LPK_OUT, which overrides the output directory.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .bounds import (
    REGIMES,
    bound_report,
    epsilon_term,
    estimate_constants,
    krr_closed_form,
    ntk_corollary_bound,
    sgf_bound_report,
    sgf_remainder,
    slack_term,
)
from .data import (
    Dataset,
    corrupt_labels,
    gen_gaussian_linear,
    gen_single_index,
    gen_two_cluster,
    load_csv,
    load_mnist_idx,
    train_test_split,
    unit_normalize,
)
from .errors import ConfigError, FormatError, LpkError
from .flow import FlowConfig, Problem, integrate_gf, integrate_sgf, integrate_two_stage, write_trace_csv
from .lpk import accumulate, gamma_gf, gamma_sgf, gamma_trace, gram_sum_residual, km_residual, write_gram_csv
from .model import LossSpec, ModelSpec, SingleIndexSpec, empirical_loss, forward, init_params, ntk_gram
from .numkit import Rng, rng_choice, rng_gaussian, sym_eig
from .stability import sgf_stability_mean, stability_sweep

KINDS = ("train-bound", "stability", "krr", "ntk", "single-index", "noise-sweep", "correlation")
OUT_ENV = "LPK_OUT"

REQ = object()

# block -> key -> (type, default); REQ marks mandatory keys
SCHEMA = {
    "dataset": {
        "kind": (str, REQ), "n": (int, REQ), "n_test": (int, 0), "d": (int, 0),
        "sep": (float, 2.0), "spread": (float, 1.0), "noise": (float, 0.0), "link": (str, "He2"),
        "unit_norm": (bool, False), "path": (str, ""), "test_path": (str, ""),
        "images": (str, ""), "labels": (str, ""), "classes": ("ints", []), "max_n": (int, 0),
        "seed": (int, -1),
    },
    "model": {
        "kind": (str, REQ), "width": (int, 0), "activation": (str, "softplus"),
        "scaling": (str, "standard"), "feature": (str, "identity"), "feature_dim": (int, 0),
        "feature_seed": (int, 0), "bandwidth": (float, 1.0), "freeze_first": (bool, False), "freeze_bias": (bool, False),
        "freeze_output": (bool, False), "zero_init": (bool, False),
    },
    "loss": {"kind": (str, REQ), "lam": (float, 0.0), "cap": (float, 1.0)},
    "flow": {
        "eta": (float, REQ), "T": (float, REQ), "batch": (int, 0), "checkpoint_every": (int, 0),
        "record": (str, "gamma"),
    },
    "bound": {"regime": (str, REQ), "delta": (float, 0.05), "gamma_sc": (float, 0.0), "beta_probes": (int, 16)},
    "probes": {"count": (int, 32)},
    "sweep": {"fractions": ("floats", REQ), "seeds": (int, 3)},
    "stability": {"count": (int, 10), "sgf": (bool, False), "sgf_seeds": (int, 16), "lpk_probes": (int, 0)},
    "krr": {
        "features": (int, REQ), "feature": (str, "rff"), "feature_seed": (int, 0),
        "lams": ("floats", [0.0]), "targets": (str, "realizable"), "noise": (float, 0.0),
    },
    "single_index": {
        "width": (int, REQ), "lam": (float, 1e-3), "tau": (float, 1.5), "rho": (float, 1.0),
        "n_active": (int, 0), "T0": (float, 0.0), "seeds": (int, 1),
    },
}

NEEDS = {
    "train-bound": ("dataset", "model", "loss", "flow", "bound"),
    "correlation": ("dataset", "model", "loss", "flow", "bound"),
    "noise-sweep": ("dataset", "model", "loss", "flow", "bound", "sweep"),
    "stability": ("dataset", "model", "loss", "flow", "bound", "stability"),
    "krr": ("dataset", "krr", "flow"),
    "ntk": ("dataset", "model", "flow"),
    "single-index": ("dataset", "single_index", "flow"),
}


# --- config -------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    kind: str
    seed: int
    out: str
    blocks: dict
    base: Path = Path(".")

    def block(self, name):
        return self.blocks[name]

    def canonical(self):
        """Sorted key = value text; the output directory is not part of it."""
        lines = [f"kind = {self.kind}", f"seed = {self.seed}"]
        for b in sorted(self.blocks):
            for k in sorted(self.blocks[b]):
                lines.append(f"{b}.{k} = {_fmt(self.blocks[b][k])}")
        return "\n".join(lines) + "\n"

    def digest(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def path(self, value):
        p = Path(value)
        return p if p.is_absolute() else self.base / p


def _fmt(v):
    if isinstance(v, list):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _cast(kind, raw, where):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "ints":
            return [int(x) for x in raw.split(",") if x.strip()]
        if kind == "floats":
            return [float(x) for x in raw.split(",") if x.strip()]
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {getattr(kind, '__name__', kind)}") from None


def parse_config(text, source="<config>", base=None):
    """Parse the flat key = value format into an ExperimentConfig."""
    top, raw = {}, {}
    for no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        where = f"{source}:{no}"
        if "." in key:
            block, sub = key.split(".", 1)
            if block not in SCHEMA:
                raise ConfigError(f"{where}: unknown block {block!r}")
            if sub not in SCHEMA[block]:
                raise ConfigError(f"{where}: unknown key {sub!r} in block {block!r}")
            if sub in raw.setdefault(block, {}):
                raise ConfigError(f"{where}: duplicate key {key!r}")
            raw[block][sub] = _cast(SCHEMA[block][sub][0], value, where)
        else:
            if key not in ("kind", "seed", "out"):
                raise ConfigError(f"{where}: unknown top-level key {key!r}")
            if key in top:
                raise ConfigError(f"{where}: duplicate key {key!r}")
            top[key] = _cast(int, value, where) if key == "seed" else value
    kind = top.get("kind")
    if kind is None:
        raise ConfigError(f"{source}: missing 'kind'")
    if kind not in KINDS:
        raise ConfigError(f"{source}: unknown experiment kind {kind!r}; choose from {KINDS}")
    if "seed" not in top:
        raise ConfigError(f"{source}: missing 'seed'")
    blocks = {}
    for name in NEEDS[kind] + tuple(b for b in raw if b not in NEEDS[kind]):
        if name not in raw and name in NEEDS[kind]:
            raise ConfigError(f"{source}: missing block '{name}' required by {kind}")
        vals = {}
        for k, (_, default) in SCHEMA[name].items():
            if k in raw[name]:
                vals[k] = raw[name][k]
            elif default is REQ:
                raise ConfigError(f"{source}: block '{name}' is missing key '{k}'")
            else:
                vals[k] = default
        blocks[name] = vals
    if "probes" not in blocks:
        blocks["probes"] = {k: d for k, (_, d) in SCHEMA["probes"].items()}
    return ExperimentConfig(kind, top["seed"], top.get("out", "runs/" + kind), blocks,
                            Path(base) if base else Path("."))


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text, str(path), path.parent)


# --- builders -------------------------------------------------------------------

def _data_rng(cfg):
    s = cfg.block("dataset")["seed"]
    return Rng(cfg.seed if s < 0 else s).child("data")


def _maybe_unit(block, train, test):
    if not block["unit_norm"]:
        return train, test
    return unit_normalize(train), (unit_normalize(test) if test is not None else None)


def build_data(cfg):
    """(train, test); test is None when no held-out set was asked for."""
    b = cfg.block("dataset")
    kind, n, n_test, rng = b["kind"], b["n"], b["n_test"], _data_rng(cfg)
    if n < 1 or n_test < 0:
        raise ConfigError("dataset.n must be positive and dataset.n_test non-negative")
    if kind in ("two-cluster", "gaussian-linear", "single-index"):
        if b["d"] < 1:
            raise ConfigError(f"dataset.d is required for {kind}")
        if kind == "two-cluster":
            train = gen_two_cluster(n, b["d"], rng, b["sep"], b["spread"], b["unit_norm"])
        elif kind == "gaussian-linear":
            train = gen_gaussian_linear(n, b["d"], rng, b["noise"], b["unit_norm"])
        else:
            train = gen_single_index(n, b["d"], rng, b["link"], b["noise"])
        test = None
        if n_test:
            X, Y = train.draw(rng.child("test"), n_test)
            test = replace(train, X=X, Y=Y, name=train.name + "-test")
        return train, test
    if kind == "csv":
        if not b["path"]:
            raise ConfigError("dataset.path is required for csv data")
        train = load_csv(cfg.path(b["path"]))
        test = load_csv(cfg.path(b["test_path"]), train.d, train.k) if b["test_path"] else None
        if len(train.X) < n:
            raise ConfigError(f"dataset.n = {n} but {b['path']} has {len(train.X)} rows")
        return _maybe_unit(b, train.subset(slice(0, n)), test)
    if kind == "mnist":
        if not (b["images"] and b["labels"]):
            raise ConfigError("dataset.images and dataset.labels are required for mnist")
        classes = b["classes"] or None
        if classes is not None and len(classes) != 2:
            raise ConfigError("dataset.classes must name exactly two digits")
        full = load_mnist_idx(cfg.path(b["images"]), cfg.path(b["labels"]), classes, b["max_n"] or None)
        train, test = train_test_split(full, n, n_test, rng.child("split"))
        return _maybe_unit(b, train, test if n_test else None)
    raise ConfigError(f"unknown dataset kind {kind!r}")


def build_model(cfg, d_in):
    b = cfg.block("model")
    return ModelSpec(b["kind"], d_in, 1, width=b["width"], activation=b["activation"],
                     scaling=b["scaling"], feature=b["feature"], feature_dim=b["feature_dim"],
                     feature_seed=b["feature_seed"], bandwidth=b["bandwidth"],
                     freeze_first=b["freeze_first"],
                     freeze_bias=b["freeze_bias"], freeze_output=b["freeze_output"],
                     zero_init=b["zero_init"])


def build_loss(cfg):
    b = cfg.block("loss")
    return LossSpec(b["kind"], b["lam"], b["cap"])


def build_flow(cfg, n):
    b = cfg.block("flow")
    fc = FlowConfig(b["eta"], b["T"], b["batch"], b["checkpoint_every"], b["record"])
    fc.steps  # validates T / eta
    if fc.batch and fc.batch < n:
        fc.steps_per_interval
        if fc.batch > n or fc.batch < 1:
            raise ConfigError(f"flow.batch must lie in [1, {n}]")
        if not fc.checkpoint_every:
            fc = replace(fc, checkpoint_every=fc.steps_per_interval)
    elif fc.batch > n:
        raise ConfigError(f"flow.batch must lie in [1, {n}]")
    return fc


def _bound_args(cfg):
    b = cfg.block("bound")
    if b["regime"] not in REGIMES:
        raise ConfigError(f"bound.regime must be one of {REGIMES}")
    gsc = b["gamma_sc"] or None
    if b["regime"] == "strongly-convex" and gsc is None:
        raise ConfigError("bound.gamma_sc is required for the strongly-convex regime")
    return b["regime"], b["delta"], gsc, b["beta_probes"]


def validate(cfg):
    """Everything a run checks before computing: specs, flow grid, file paths."""
    b = cfg.block("dataset")
    for key in ("path", "test_path", "images", "labels"):
        if b[key] and not cfg.path(b[key]).exists():
            raise FormatError(f"dataset.{key}: {cfg.path(b[key])} does not exist")
    d = b["d"] or 1
    if "model" in cfg.blocks:
        build_model(cfg, d if b["kind"] != "mnist" else 784)
    if "loss" in cfg.blocks:
        build_loss(cfg)
    build_flow(cfg, b["n"])
    if "bound" in cfg.blocks:
        _bound_args(cfg)
    if cfg.kind == "single-index":
        s = cfg.block("single_index")
        SingleIndexSpec(b["d"], s["width"], s["lam"], s["tau"])
    if cfg.kind == "noise-sweep" and any(not 0 <= p <= 1 for p in cfg.block("sweep")["fractions"]):
        raise ConfigError("sweep.fractions must lie in [0, 1]")


# --- shared helpers -------------------------------------------------------------------

@dataclass
class RunOutput:
    report: dict
    tables: dict = field(default_factory=dict)  # file name -> (header, rows)
    gram: Optional[np.ndarray] = None
    traces: list = field(default_factory=list)  # trajectories for trace.csv
    warnings: list = field(default_factory=list)


def pearson(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if len(a) < 2 or np.std(a) == 0 or np.std(b) == 0:
        return float("nan")
    return float(np.corrcoef(a, b)[0, 1])


def spearman(a):
    """Rank correlation of a sequence with its position."""
    a = np.asarray(a, dtype=float)
    ranks = np.empty(len(a))
    order = np.argsort(a, kind="stable")
    ranks[order] = np.arange(len(a))
    for v in np.unique(a):  # average ranks of ties
        tie = a == v
        ranks[tie] = ranks[tie].mean()
    return pearson(ranks, np.arange(len(a)))


def noisy_risk(spec, loss, w, X, Y, p):
    """Held-out risk under label resampling at rate p, integrated over the noise.

    A resampled binary label keeps its value or flips with probability 1/2,
    so the label is flipped with probability p/2 overall.
    """
    clean = empirical_loss(spec, loss, w, X, Y)
    if p == 0:
        return clean
    return (1 - p / 2) * clean + p / 2 * empirical_loss(spec, loss, w, X, -np.asarray(Y))


def _train(spec, loss, train, fc, w0, rng, probes=None):
    prob = Problem(spec, loss, train.X, train.Y)
    if fc.batch and fc.batch < train.n:
        return integrate_sgf(prob, fc, w0, rng=rng.child("schedule"), probes=probes)
    return integrate_gf(prob, fc, w0, probes=probes)


def _ckpt_gap(tr, spec, loss, test, p=0.0):
    """Held-out minus training loss at every checkpoint."""
    return np.array([noisy_risk(spec, loss, w, test.X, test.Y, p) - tr.losses[s]
                     for s, w in zip(tr.ckpt_steps, tr.ckpt_params)])


def train_and_bound(cfg, seed, train, test, p=0.0):
    """Train per the flow block and assemble Gamma, epsilon and the bound traces."""
    root = Rng(seed)
    spec, loss = build_model(cfg, train.d), build_loss(cfg)
    regime, delta, gsc, beta_probes = _bound_args(cfg)
    fc = build_flow(cfg, train.n)
    w0 = init_params(spec, root.child("init"))
    k = cfg.block("probes")["count"]
    probes = (test.X[:k], test.Y[:k]) if test is not None and k else None
    tr = _train(spec, loss, train, fc, w0, root, probes)
    sgf = tr.mode == "sgf"
    acc = accumulate(tr, "full" if fc.record == "full" else "diag")
    gamma = gamma_sgf(tr, acc) if sgf else gamma_gf(tr, acc)
    consts = estimate_constants([tr], regime, gsc, extra=probes, probes=beta_probes,
                                seed=seed)
    n = train.n
    gap = None
    times, gam = gamma_trace(tr)
    if sgf:
        spi = fc.steps_per_interval
        keep = [i for i, s in enumerate(tr.ckpt_steps) if s % spi == 0]
        steps = [tr.ckpt_steps[i] for i in keep]
        if len(steps) != len(times):
            raise ConfigError("flow.checkpoint_every must divide the steps per interval")
        rest = np.array([sgf_remainder(t, n, delta, consts) for t in times])
        report = sgf_bound_report(gamma, consts, regime, fc.T, n, delta, warnings=tr.warnings)
        eps = rest - slack_term(n, delta)
    else:
        steps = list(tr.ckpt_steps)
        eps = np.array([epsilon_term(regime, consts, t, n, delta)[0] for t in times])
        rest = eps + slack_term(n, delta)
        report = bound_report(gamma, consts, regime, fc.T, n, delta, warnings=tr.warnings)
    totals = gam + rest
    rows_gap = None
    diag = {"n": n, "steps": tr.steps, "mode": tr.mode, "loss_0": float(tr.losses[0]),
            "loss_T": float(tr.losses[-1]), "loss_drop": float(tr.loss_drop), "noise": p,
            "trace": acc.trace}
    if test is not None:
        sub = [tr.ckpt_steps.index(s) for s in steps]
        view = replace(tr, ckpt_steps=steps, ckpt_params=[tr.ckpt_params[i] for i in sub])
        rows_gap = _ckpt_gap(view, spec, loss, test, p)
        gap = float(rows_gap[-1])
        report.gap = gap
        diag["pearson_gamma_gap"] = pearson(gam, rows_gap)
        diag["bound_holds"] = bool(np.all(totals >= rows_gap))
        diag["n_test"] = test.n
    if probes is not None:
        diag["km_residual_max"] = float(np.max(km_residual(tr)))
    if not sgf and fc.record == "full":
        diag["gram_sum_residual"] = float(gram_sum_residual(tr, acc))
    header = ["time", "gamma", "epsilon", "total"] + (["gap"] if rows_gap is not None else [])
    rows = [[t, g, e, tot] + ([rows_gap[i]] if rows_gap is not None else [])
            for i, (t, g, e, tot) in enumerate(zip(times, gam, eps, totals))]
    return tr, acc, report, diag, (header, rows)


# --- experiments -------------------------------------------------------------------------

def run_train_bound(cfg):
    train, test = build_data(cfg)
    tr, acc, report, diag, gtab = train_and_bound(cfg, cfg.seed, train, test)
    out = RunOutput({**asdict(report), "diagnostics": diag}, {"gamma.csv": gtab},
                    acc.gram, [tr], list(report.warnings))
    return out


def run_correlation(cfg):
    train, test = build_data(cfg)
    if test is None:
        raise ConfigError("correlation runs need a held-out set (dataset.n_test > 0)")
    return run_train_bound(cfg)


def run_noise_sweep(cfg):
    train, test = build_data(cfg)
    if train.task != "binary":
        raise ConfigError("label-noise sweeps need a binary classification dataset")
    if test is None:
        raise ConfigError("label-noise sweeps need a held-out set (dataset.n_test > 0)")
    sw = cfg.block("sweep")
    rows, runs, warns = [], [], []
    for s in range(sw["seeds"]):
        seed = cfg.seed + s
        for p in sw["fractions"]:
            noisy = corrupt_labels(train, p, Rng(seed).child(f"noise/{p!r}"))
            tr, acc, report, diag, _ = train_and_bound(cfg, seed, noisy, test, p)
            runs.append({**asdict(report), "noise": p, "seed": seed, "diagnostics": diag})
            rows.append([p, seed, report.gamma, report.gap, report.epsilon, report.total,
                         float(tr.losses[-1])])
            warns += [f"p={p} seed={seed}: {w}" for w in report.warnings]
    fr = sw["fractions"]
    mean_g = [float(np.mean([r[2] for r in rows if r[0] == p])) for p in fr]
    mean_gap = [float(np.mean([r[3] for r in rows if r[0] == p])) for p in fr]
    report = {
        "runs": runs,
        "fractions": fr,
        "mean_gamma": mean_g,
        "mean_gap": mean_gap,
        "spearman_gamma": spearman(mean_g) if len(fr) > 1 else None,
        "gamma_increasing": bool(np.all(np.diff(mean_g) > 0)),
        "gap_nondecreasing": bool(np.all(np.diff(mean_gap) >= 0)),
    }
    header = ["noise", "seed", "gamma", "gap", "epsilon", "total", "train_loss"]
    return RunOutput(report, {"sweep.csv": (header, rows)}, warnings=warns)


def run_stability(cfg):
    train, test = build_data(cfg)
    spec, loss = build_model(cfg, train.d), build_loss(cfg)
    regime, delta, gsc, _ = _bound_args(cfg)
    fc = build_flow(cfg, train.n)
    st = cfg.block("stability")
    root = Rng(cfg.seed)
    w0 = init_params(spec, root.child("init"))
    if st["count"] > train.n:
        raise ConfigError(f"stability.count exceeds n = {train.n}")
    idx = rng_choice(root.child("indices"), train.n, st["count"])
    probes = None
    if st["lpk_probes"]:
        if test is None or test.n < st["lpk_probes"]:
            raise ConfigError("stability.lpk_probes needs that many held-out points")
        probes = (test.X[: st["lpk_probes"]], test.Y[: st["lpk_probes"]])
    if st["sgf"]:
        reps = [sgf_stability_mean(spec, loss, train, fc, w0, int(i), regime, gsc, st["sgf_seeds"],
                                   seed=cfg.seed + int(i)) for i in idx]
    else:
        reps = stability_sweep(spec, loss, train, fc, w0, idx, cfg.seed, regime, gsc, probes)
    rows = [[r.index, t, dv, ev] for r in reps for t, dv, ev in zip(r.times, r.divergence, r.envelope)]
    ratios = [r.max_ratio for r in reps]
    report = {
        "runs": [r.summary() for r in reps],
        "regime": regime,
        "max_ratio": float(max(ratios)),
        "within_envelope": bool(max(ratios) <= 1.05),
    }
    if probes is not None:
        report["max_lpk_ratio"] = float(max(r.lpk_deviation / r.lpk_bound for r in reps))
    warns = [w for r in reps for w in r.warnings]
    return RunOutput(report, {"stability.csv": (["index", "time", "divergence", "envelope"], rows)},
                     warnings=warns)


def run_krr(cfg):
    train, _ = build_data(cfg)
    kb, fb = cfg.block("krr"), cfg.block("flow")
    spec = ModelSpec("features", train.d, 1, feature=kb["feature"], feature_dim=kb["features"],
                     feature_seed=kb["feature_seed"], zero_init=True)
    X = train.X
    Phi = spec.feature_map()(X).T
    root = Rng(cfg.seed)
    if kb["targets"] == "realizable":
        y = Phi.T @ rng_gaussian(root.child("teacher"), kb["features"])
        if kb["noise"]:
            y = y + kb["noise"] * rng_gaussian(root.child("target-noise"), train.n)
    elif kb["targets"] == "data":
        if train.k != 1:
            raise ConfigError("krr needs scalar targets")
        y = train.Y[:, 0]
    else:
        raise ConfigError("krr.targets must be 'realizable' or 'data'")
    fc = FlowConfig(fb["eta"], fb["T"], checkpoint_every=fb["checkpoint_every"])
    rows, runs, trs = [], [], []
    for lam in kb["lams"]:
        kr = krr_closed_form(Phi, y, lam, fc.T)
        prob = Problem(spec, LossSpec("reg-square", lam), X, y)
        tr = integrate_gf(prob, fc, np.zeros(spec.n_params))
        g = gamma_gf(tr)
        rel = abs(g - kr.gamma) / kr.gamma if kr.gamma > 0 else abs(g)
        runs.append({
            "lam": lam, "gamma_closed": kr.gamma, "gamma_euler": g, "rel_err": rel,
            "loss_drop": kr.loss_drop, "trace": kr.trace, "gamma_rhs": kr.gamma_rhs,
            "gamma_rhs_dual": kr.gamma_rhs_dual,
            "total_sum_residual": abs(kr.total_sum / train.n ** 2 - kr.loss_drop),
        })
        rows.append([lam, kr.gamma, g, rel, kr.gamma_rhs if kr.gamma_rhs is not None else float("nan")])
        trs.append(tr)
    report = {"runs": runs, "n": train.n, "features": kb["features"], "T": fc.T, "eta": fc.eta}
    return RunOutput(report, {"krr.csv": (["lam", "gamma_closed", "gamma_euler", "rel_err", "gamma_rhs"], rows)},
                     traces=trs[:1])


def run_ntk(cfg):
    train, _ = build_data(cfg)
    spec = build_model(cfg, train.d)
    if spec.kind != "mlp2":
        raise ConfigError("ntk runs need an mlp2 model")
    loss = LossSpec("square")
    if "loss" in cfg.blocks and cfg.block("loss")["kind"] != "square":
        raise ConfigError("ntk runs use the square loss")
    fc = build_flow(cfg, train.n)
    w0 = init_params(spec, Rng(cfg.seed).child("init"))
    tr = integrate_gf(Problem(spec, loss, train.X, train.Y), fc, w0)
    n = train.n
    lams = np.array([sym_eig(ntk_gram(spec, w, train.X)).values[[0, -1]] for w in tr.ckpt_params])
    lmax, lmin = float(lams[:, 0].max()), float(lams[:, 1].min())
    r0 = float(np.sum((forward(spec, w0, train.X) - train.Y) ** 2))
    t = np.asarray(tr.ckpt_steps) * fc.eta
    L = tr.losses[tr.ckpt_steps]
    env = np.exp(-2 * lmin * t / n) * tr.losses[0] if lmin > 0 else np.full(len(t), tr.losses[0])
    g = gamma_gf(tr)
    bound = ntk_corollary_bound(lmax, lmin, r0, n, fc.T) if lmin > 0 else float("nan")
    report = {
        "gamma": g, "ntk_bound": bound, "lam_max": lmax, "lam_min": lmin, "init_residual_sq": r0,
        "loss_0": float(tr.losses[0]), "loss_T": float(tr.losses[-1]),
        "within_envelope": bool(np.all(L <= env * (1 + 1e-9))),
        "max_envelope_ratio": float(np.max(L / env)),
        "gamma_within_bound": bool(lmin > 0 and g <= bound),
        "n": n, "width": spec.width, "T": fc.T, "warnings": tr.warnings,
    }
    rows = [[s, ti, li, ei, a, b] for s, ti, li, ei, (a, b) in zip(tr.ckpt_steps, t, L, env, lams)]
    return RunOutput(report, {"ntk.csv": (["step", "time", "train_loss", "envelope", "lam_max", "lam_min"], rows)},
                     traces=[tr], warnings=list(tr.warnings))


def run_single_index(cfg):
    db, sb = cfg.block("dataset"), cfg.block("single_index")
    if db["kind"] != "single-index":
        raise ConfigError("single-index runs need dataset.kind = single-index")
    fc = build_flow(cfg, db["n"])
    spec = SingleIndexSpec(db["d"], sb["width"], sb["lam"], sb["tau"])
    rows, runs, trs = [], [], []
    for s in range(sb["seeds"]):
        seed = cfg.seed + s
        data = gen_single_index(db["n"], db["d"], Rng(seed).child("data"), db["link"], db["noise"])
        theta = data.meta["theta_star"]
        tr = integrate_two_stage(spec, data.X, data.Y[:, 0], fc, sb["T0"], Rng(seed).child("init"),
                                 sb["rho"], sb["n_active"] or None, theta)
        g = gamma_gf(tr)
        ov = float(tr.extra["overlap"][-1])
        runs.append({"seed": seed, "gamma": g, "overlap": ov, "loss_0": float(tr.losses[0]),
                     "loss_T": float(tr.losses[-1])})
        rows += [[seed, s_ * fc.eta, float(o)] for s_, o in zip(tr.ckpt_steps, tr.extra["overlap"])]
        trs.append(tr)
    report = {
        "runs": runs, "n": db["n"], "d": db["d"], "width": sb["width"],
        "mean_gamma": float(np.mean([r["gamma"] for r in runs])),
        "recovered": int(sum(r["overlap"] >= 0.7 for r in runs)),
    }
    return RunOutput(report, {"overlap.csv": (["seed", "time", "overlap"], rows)}, traces=trs[:1])


RUNNERS = {
    "train-bound": run_train_bound,
    "correlation": run_correlation,
    "noise-sweep": run_noise_sweep,
    "stability": run_stability,
    "krr": run_krr,
    "ntk": run_ntk,
    "single-index": run_single_index,
}


# --- outputs ---------------------------------------------------------------------------

def _write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return x


def write_outputs(cfg, result, out_dir, wall_clock):
    """Write report, traces and tables, then the manifest as the completion marker."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    (out / "report.json").write_text(json.dumps(_jsonable(result.report), sort_keys=True, indent=2) + "\n")
    files.append("report.json")
    if result.traces:
        write_trace_csv(result.traces[0], out / "trace.csv")
        files.append("trace.csv")
    for name, (header, rows) in sorted(result.tables.items()):
        _write_table(out / name, header, rows)
        files.append(name)
    if result.gram is not None:
        write_gram_csv(result.gram, out / "gram.csv")
        files.append("gram.csv")
    manifest = {
        "config_hash": cfg.digest(),
        "kind": cfg.kind,
        "seed": cfg.seed,
        "version": __version__,
        "wall_clock": wall_clock,
        "files": [{"name": f, "sha256": _sha256(out / f)} for f in files],
        "warnings": list(result.warnings),
    }
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    os.replace(tmp, out / "manifest.json")
    return manifest


def run(cfg, out_dir=None):
    """Run one experiment and persist it; returns (RunOutput, manifest)."""
    out = Path(out_dir or cfg.out)
    stale = out / "manifest.json"
    if stale.exists():
        stale.unlink()
    t0 = time.perf_counter()
    result = RUNNERS[cfg.kind](cfg)
    return result, write_outputs(cfg, result, out, round(time.perf_counter() - t0, 3))


# --- entry point ------------------------------------------------------------------------

def main(argv=None):
    ap = argparse.ArgumentParser(prog="lpk", description="Loss path kernel experiments.")
    ap.add_argument("command", choices=KINDS)
    ap.add_argument("--config", required=True)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out")
    ap.add_argument("--dry-run", action="store_true")
    args = ap.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if cfg.kind != args.command:
            raise ConfigError(f"config describes a {cfg.kind!r} run, not {args.command!r}")
        if args.seed is not None:
            cfg.seed = args.seed
        out = args.out or os.environ.get(OUT_ENV) or cfg.out
        validate(cfg)
        if args.dry_run:
            print(f"config ok: {cfg.kind}, seed {cfg.seed}, hash {cfg.digest()[:16]}, out {out}")
            return 0
        result, manifest = run(cfg, out)
    except LpkError as e:
        print(f"lpk: error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"lpk: I/O error: {e}", file=sys.stderr)
        return 4
    for w in manifest["warnings"]:
        print(f"lpk: warning: {w}", file=sys.stderr)
    print(f"wrote {len(manifest['files'])} files and manifest.json to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
