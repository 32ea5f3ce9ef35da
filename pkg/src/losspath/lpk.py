"""Loss path kernel accumulation, the Gamma complexity and its diagnostics.

The loss path kernel on a recorded trajectory is the left-endpoint sum

    K_T(z, z') = eta * sum_s <grad l(w_s, z), grad l(w_s, z')>.

Only its diagonal on the training set and its total sum are needed for
Gamma. The total sum has a closed form in the step directions: for full
batch gradient flow sum_ij K(z_i, z_j) = n^2 eta sum_s ||grad L_S(w_s)||^2,
and for stochastic flow the batch double sum of interval t equals
m^2 eta sum_{s in t} ||step direction||^2.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError
from .flow import replay


@dataclass
class LPKAccumulator:
    mode: str  # "diag" or "full"
    n: int
    steps: int
    eta: float
    diag: np.ndarray  # K_T(z_i, z_i)
    total: float  # sum_ij K_T(z_i, z_j)
    loss_drop: float  # L_S(w_0) - L_S(w_T)
    gram: Optional[np.ndarray] = None  # K_T on the training set, full mode only
    interval_batch: Optional[np.ndarray] = None  # (1/m^2) sum_{i,j in S_t} K_{t,t+1}
    interval_diag: Optional[np.ndarray] = None  # sum_i K_{t,t+1}(z_i, z_i)
    interval_grams: Optional[list] = None

    @property
    def trace(self):
        return float(self.diag.sum())


def accumulate(tr, mode="diag"):
    """Fold the recorded per-step digests into kernel sums."""
    if mode not in ("diag", "full"):
        raise ConfigError(f"accumulator mode must be 'diag' or 'full', got {mode!r}")
    eta, S, n = tr.eta, tr.steps, tr.n
    diag = eta * tr.sqnorms[:S].sum(axis=0)
    if tr.mode == "gf":
        total = n * n * eta * float(tr.step_sq.sum())
    else:
        total = float("nan")
    acc = LPKAccumulator(mode, n, S, eta, diag, total, float(tr.loss_drop))
    if mode == "full":
        if not tr.segments and S:
            raise ConfigError("full accumulation needs a trajectory recorded at level 'full'")
        K = np.zeros((n, n))
        for _, _, G in tr.segments:
            K += eta * G
        acc.gram = K
        acc.total = float(K.sum())
    if tr.mode == "sgf":
        spi = tr.config.steps_per_interval
        I = S // spi
        acc.interval_batch = eta * tr.step_sq.reshape(I, spi).sum(axis=1)
        acc.interval_diag = eta * tr.sqnorms[:S].sum(axis=1).reshape(I, spi).sum(axis=1)
        if mode == "full":
            acc.interval_grams = [eta * G for _, _, G in tr.segments]
        if mode == "diag":
            acc.total = float("nan")  # per-interval batch sums replace the total
    return acc


def gamma_gf(tr, acc=None):
    """Gamma = (2/n) sqrt(L_S(w_0) - L_S(w_T)) sqrt(sum_i K_T(z_i, z_i))."""
    acc = acc or accumulate(tr)
    drop = max(tr.loss_drop, 0.0)
    return 2.0 / tr.n * np.sqrt(drop) * np.sqrt(acc.trace)


def gamma_sgf(tr, acc=None):
    """Gamma = (2/n) sum_t sqrt(batch block sum_t) sqrt(diagonal sum_t)."""
    if tr.mode != "sgf":
        raise ConfigError("gamma_sgf needs a stochastic-flow trajectory")
    acc = acc or accumulate(tr)
    if acc.interval_batch is None:
        raise ConfigError("trajectory lacks per-interval batch kernel sums")
    return 2.0 / tr.n * float(np.sum(np.sqrt(acc.interval_batch) * np.sqrt(acc.interval_diag)))


def gamma_trace(tr):
    """(times, Gamma(t)) at every checkpoint (GF) or interval boundary (SGF)."""
    eta = tr.eta
    cum_diag = np.concatenate([[0.0], np.cumsum(eta * tr.sqnorms[: tr.steps].sum(axis=1))])
    if tr.mode == "gf":
        at = np.asarray(tr.ckpt_steps)
        drop = np.maximum(tr.losses[0] - tr.losses[at], 0.0)
        return at * eta, 2.0 / tr.n * np.sqrt(drop) * np.sqrt(cum_diag[at])
    spi = tr.config.steps_per_interval
    I = tr.steps // spi
    bsum = eta * tr.step_sq.reshape(I, spi).sum(axis=1)
    dsum = np.diff(cum_diag[:: spi])
    terms = np.sqrt(bsum) * np.sqrt(dsum)
    return np.arange(I + 1, dtype=float), 2.0 / tr.n * np.concatenate([[0.0], np.cumsum(terms)])


def km_sum(tr):
    """Per probe: eta sum_s <grad l(w_s, z), step direction_s>.

    For GF this equals (1/n) sum_i K_T(z, z_i); for SGF it equals
    sum_t (1/m) sum_{i in S_t} K_{t,t+1}(z, z_i).
    """
    if tr.probe_dots is None:
        raise ConfigError("trajectory was recorded without probe points")
    return tr.eta * tr.probe_dots.sum(axis=0)


def km_residual(tr, x=None, y=None):
    """|l(w_T, z) - l(w_0, z) + kernel-machine sum| for probe points.

    Without arguments this uses the probes recorded during integration;
    with (x, y) it replays the trajectory to evaluate new points.
    """
    if x is None:
        sums = km_sum(tr)
        return np.abs(tr.probe_lossT - tr.probe_loss0 + sums)
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    Y = np.asarray(y, dtype=np.float64).reshape(len(X), -1)
    prob = tr.problem
    total = np.zeros(len(X))
    for s, w, g in replay(tr):
        total += tr.eta * prob.factor(w, X, Y, step=s).dot(g)
    l0 = prob.factor(tr.w0, X, Y, step=0).losses
    lT = prob.factor(tr.wT, X, Y, step=tr.steps).losses
    return np.abs(lT - l0 + total)


def eval_at(tr, z, z2):
    """K_T(z, z') from checkpoints, each weighted by eta times its stride.

    Exact when checkpoints were taken every step; otherwise a coarser
    left-endpoint Riemann sum.
    """
    (x1, y1), (x2, y2) = z, z2
    X1 = np.atleast_2d(x1)
    X2 = np.atleast_2d(x2)
    Y1 = np.asarray(y1, dtype=np.float64).reshape(len(X1), -1)
    Y2 = np.asarray(y2, dtype=np.float64).reshape(len(X2), -1)
    prob = tr.problem
    steps = [s for s in tr.ckpt_steps if s < tr.steps]
    bounds = steps[1:] + [tr.steps]
    K = np.zeros((len(X1), len(X2)))
    for s, nxt, w in zip(steps, bounds, tr.ckpt_params):
        a = prob.factor(w, X1, Y1, step=s)
        b = prob.factor(w, X2, Y2, step=s)
        K += tr.eta * (nxt - s) * a.cross(b)
    return K


def gram_sum_residual(tr, acc=None):
    """|(1/n^2) sum_ij K_T(z_i, z_j) - (L_S(w_0) - L_S(w_T))| for GF."""
    if tr.mode != "gf":
        raise ConfigError("the total-sum identity is stated for full-batch flow")
    acc = acc or accumulate(tr)
    return abs(acc.total / tr.n ** 2 - tr.loss_drop)


def write_gram_csv(K, path):
    """Upper triangle (i <= j) as rows i, j, value."""
    K = np.asarray(K)
    iu, ju = np.triu_indices(K.shape[0])
    with open(path, "w") as fh:
        fh.write("i,j,value\n")
        for i, j in zip(iu, ju):
            fh.write(f"{i},{j},{float(K[i, j])!r}\n")


def read_gram_csv(path, n=None):
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    m = int(rows[:, :2].max()) + 1 if n is None else n
    K = np.zeros((m, m))
    i, j = rows[:, 0].astype(int), rows[:, 1].astype(int)
    K[i, j] = rows[:, 2]
    K[j, i] = rows[:, 2]
    return K


def write_gamma_trace_csv(times, gammas, path, gaps=None):
    with open(path, "w") as fh:
        fh.write("time,gamma" + (",gap" if gaps is not None else "") + "\n")
        for k, (t, g) in enumerate(zip(times, gammas)):
            tail = f",{float(gaps[k])!r}" if gaps is not None else ""
            fh.write(f"{float(t)!r},{float(g)!r}{tail}\n")
