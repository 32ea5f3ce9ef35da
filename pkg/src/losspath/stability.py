"""Paired-trajectory stability under one-sample replacement.

Two flows are run from the same initialisation (and, for SGF, the same
minibatch schedule) on S and on S with sample i replaced by a fresh draw.
Their parameter distance is compared against the regime envelope

    convex           2 L t / n
    strongly convex  2 L / (gamma n)
    non-convex       2 L (exp(beta t) - 1) / (beta n)

and the change in the loss path kernel on probe pairs against

    convex           2 L^2 beta T^2 / n
    strongly convex  4 L^2 beta T / (gamma n)
    non-convex       4 L^2 (exp(beta T) - beta T - 1) / (beta n)
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .bounds import REGIMES, Constants, estimate_constants
from .errors import ConfigError
from .flow import Problem, integrate_gf, integrate_sgf, make_schedule
from .numkit import Rng


def fresh_point(data, rng):
    """One new sample from the dataset's generator."""
    if data.draw is None:
        raise ConfigError(f"dataset {data.name!r} has no generator; pass the replacement point")
    x, y = data.draw(rng, 1)
    return x[0], np.asarray(y).reshape(-1)


def perturb_dataset(data, i, z):
    """Copy of `data` with row i replaced by z = (x, y); the original is untouched."""
    if not 0 <= i < data.n:
        raise ConfigError(f"index {i} out of range for n = {data.n}")
    x, y = np.asarray(z[0], dtype=np.float64), np.asarray(z[1], dtype=np.float64).reshape(-1)
    if x.shape != (data.d,) or y.shape != (data.k,):
        raise ConfigError(f"replacement point must have shapes ({data.d},), ({data.k},)")
    X, Y = data.X.copy(), data.Y.copy()
    X[i], Y[i] = x, y
    return replace(data, X=X, Y=Y)


def _need(regime, consts):
    if regime == "strongly-convex" and not (consts.gamma_sc and consts.gamma_sc > 0):
        raise ConfigError("strongly-convex envelope needs a positive strong-convexity constant")
    if regime == "non-convex" and consts.beta is None:
        raise ConfigError("non-convex envelope needs a smoothness estimate (beta)")


def envelope(regime, consts, t, n):
    """Parameter-divergence envelope at times t for n samples."""
    t = np.asarray(t, dtype=np.float64)
    _need(regime, consts)
    L, beta = consts.L, consts.beta
    if regime == "convex":
        return 2 * L * t / n
    if regime == "strongly-convex":
        return np.full_like(t, 2 * L / (consts.gamma_sc * n))
    if regime == "non-convex":
        if beta == 0:
            return 2 * L * t / n
        return 2 * L * np.expm1(beta * t) / (beta * n)
    raise ConfigError(f"unknown regime {regime!r}")


def lpk_envelope(regime, consts, T, n):
    """Envelope on the kernel change between S and S^(i) at horizon T."""
    _need(regime, consts)
    if consts.beta is None:
        raise ConfigError("kernel envelope needs a smoothness estimate (beta)")
    L2, beta = consts.L ** 2, consts.beta
    if regime == "convex":
        return 2 * L2 * beta * T * T / n
    if regime == "strongly-convex":
        return 4 * L2 * beta * T / (consts.gamma_sc * n)
    if regime == "non-convex":
        bt = beta * T
        return 4 * L2 * (np.expm1(bt) - bt) / (beta * n) if beta else 0.0
    raise ConfigError(f"unknown regime {regime!r}")


@dataclass
class StabilityReport:
    index: int
    regime: str
    times: np.ndarray
    divergence: np.ndarray
    envelope: np.ndarray
    constants: Constants
    lpk_deviation: Optional[float] = None
    lpk_bound: Optional[float] = None
    warnings: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def max_ratio(self):
        env = np.where(self.envelope > 0, self.envelope, np.inf)
        r = np.where(self.times > 0, self.divergence / env, 0.0)
        return float(np.max(r))

    def violations(self, margin=1.05):
        """Checkpoints where divergence exceeds margin * envelope."""
        return np.flatnonzero(self.divergence > margin * self.envelope)

    def summary(self):
        return {
            "index": self.index,
            "regime": self.regime,
            "max_divergence": float(self.divergence.max()),
            "max_ratio": self.max_ratio,
            "constants": asdict(self.constants),
            "lpk_deviation": self.lpk_deviation,
            "lpk_bound": self.lpk_bound,
            "warnings": self.warnings,
        }


def paired_divergence(spec, loss, data, cfg, w0, i, rng, regime, gamma_sc=None,
                      probes=None, sgf=False, z=None):
    """Run the S / S^(i) pair and measure divergence against its envelope.

    z is the replacement point; by default it is drawn from the dataset's
    generator. SGF pairs share one minibatch schedule.
    """
    if regime not in REGIMES:
        raise ConfigError(f"regime must be one of {REGIMES}")
    if z is None:
        z = fresh_point(data, rng.child("swap"))
    alt = perturb_dataset(data, i, z)
    pa = Problem(spec, loss, data.X, data.Y)
    pb = Problem(spec, loss, alt.X, alt.Y)
    if sgf:
        sched = make_schedule(data.n, cfg.batch or data.n, cfg.steps // cfg.steps_per_interval,
                              rng.child("schedule"))
        ta = integrate_sgf(pa, cfg, w0, schedule=sched, probes=probes)
        tb = integrate_sgf(pb, cfg, w0, schedule=sched, probes=probes)
    else:
        ta = integrate_gf(pa, cfg, w0, probes=probes)
        tb = integrate_gf(pb, cfg, w0, probes=probes)
    swapped = (np.stack([data.X[i], alt.X[i]]), np.stack([data.Y[i], alt.Y[i]]))
    extra = swapped
    if probes is not None:
        extra = (np.concatenate([swapped[0], probes[0]]),
                 np.concatenate([swapped[1], np.asarray(probes[1]).reshape(len(probes[0]), -1)]))
    consts = estimate_constants([ta, tb], regime, gamma_sc, extra=extra)
    times = np.asarray(ta.ckpt_steps) * cfg.eta
    div = np.array([np.linalg.norm(a - b) for a, b in zip(ta.ckpt_params, tb.ckpt_params)])
    rep = StabilityReport(i, regime, times, div, envelope(regime, consts, times, data.n), consts,
                          warnings=ta.warnings + tb.warnings)
    if probes is not None:
        dev = np.abs(ta.probe_gram - tb.probe_gram)
        rep.extra["lpk_matrix"] = dev
        rep.lpk_deviation = float(dev.max())
        rep.lpk_bound = float(lpk_envelope(regime, consts, cfg.T, data.n))
    return rep


def lpk_perturbation(spec, loss, data, cfg, w0, i, probes, regime, gamma_sc=None, z=None, rng=None):
    """Per probe pair |K_T(z, z''; S) - K_T(z, z''; S^(i))| and its envelope.

    Returns (deviation matrix, envelope, constants).
    """
    rep = paired_divergence(spec, loss, data, cfg, w0, i, rng or Rng(0), regime, gamma_sc,
                            probes=probes, z=z)
    return rep.extra["lpk_matrix"], rep.lpk_bound, rep.constants


def stability_sweep(spec, loss, data, cfg, w0, indices, seed, regime, gamma_sc=None,
                    probes=None, sgf=False):
    """One paired run per index; runs are independent and executed in turn."""
    root = Rng(seed).child("stability")
    return [paired_divergence(spec, loss, data, cfg, w0, int(i), root.child(int(i)), regime,
                              gamma_sc, probes, sgf) for i in indices]


def sgf_stability_mean(spec, loss, data, cfg, w0, i, regime, gamma_sc=None, seeds=16, z=None,
                       seed=0):
    """Average SGF divergence over independent schedule seeds for one index.

    Every seed couples its pair through one shared schedule; the same
    replacement point is used for all seeds.
    """
    root = Rng(seed).child("sgf-stability")
    if z is None:
        z = fresh_point(data, root.child("swap"))
    reps = [paired_divergence(spec, loss, data, cfg, w0, i, root.child(s), regime, gamma_sc,
                              sgf=True, z=z) for s in range(seeds)]
    mean = StabilityReport(i, regime, reps[0].times, np.mean([r.divergence for r in reps], axis=0),
                           np.max([r.envelope for r in reps], axis=0),
                           max((r.constants for r in reps), key=lambda c: c.L))
    mean.extra["per_seed"] = reps
    return mean


def write_stability(rep, csv_path, json_path):
    with open(csv_path, "w") as fh:
        fh.write("time,divergence,envelope\n")
        for t, d, e in zip(rep.times, rep.divergence, rep.envelope):
            fh.write(f"{float(t)!r},{float(d)!r},{float(e)!r}\n")
    with open(json_path, "w") as fh:
        json.dump(rep.summary(), fh, sort_keys=True, indent=2)
