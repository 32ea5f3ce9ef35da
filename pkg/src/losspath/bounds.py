"""Generalization bound assembly: constants, epsilon, slack and closed forms.

The bound on the generalization gap after gradient flow for time T is

    Gamma + epsilon + 3 sqrt(ln(4n/delta) / (2n)).

epsilon collects the price of passing from the data-dependent kernel class
to a fixed one (stability of the kernel under one-sample replacement plus
a covering argument). Its explicit form here is

    E       = kappa_excess + 4 Delta sqrt(6n ln 2n) + 8 Delta,  Delta = L^2 T
    epsilon = sqrt(E) / n + sqrt(n L^2 T + E) / n^2

capped by 2 L sqrt(T / n), which comes from bounding the kernel trace by
the squared Lipschitz constant. kappa_excess depends on how far one sample
can move the loss path kernel, which differs by regime.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, RankError
from .numkit import Rng, sym_eig, sym_expm_action

REGIMES = ("convex", "strongly-convex", "non-convex")
EXP_OVERFLOW = 700.0


NOTE = "empirical path-wise surrogates for L and beta; bound validity is as-instantiated"


@dataclass(frozen=True)
class Constants:
    L: float
    beta: Optional[float]  # None when no smoothness probes were run
    gamma_sc: Optional[float] = None
    note: str = NOTE


def _check_regime(regime, consts=None):
    if regime not in REGIMES:
        raise ConfigError(f"regime must be one of {REGIMES}, got {regime!r}")
    if regime == "strongly-convex" and consts is not None and not (consts.gamma_sc and consts.gamma_sc > 0):
        raise ConfigError("strongly-convex regime needs a positive strong-convexity constant")


# --- constants ---------------------------------------------------------------

def _hessian_norm(problem, w, x, y, step, iters, rng):
    """Power iteration on the per-sample Hessian with finite-difference products."""
    mask = problem.spec.mask() if hasattr(problem.spec, "mask") else np.ones(problem.n_params)
    v = rng.generator().standard_normal(problem.n_params) * mask
    v /= np.linalg.norm(v)
    h = 1e-4
    lam = 0.0
    for _ in range(iters):
        gp = problem.factor(w + h * v, x, y, step).mean()
        gm = problem.factor(w - h * v, x, y, step).mean()
        hv = (gp - gm) / (2 * h) * mask
        lam = float(np.linalg.norm(hv))
        if lam == 0.0:
            break
        v = hv / lam
    return lam


def estimate_constants(trajs, regime, gamma_sc=None, extra=None, n_samples=16, n_ckpts=8,
                       iters=20, seed=0, probes=None):
    """Empirical Lipschitz and smoothness constants along recorded trajectories.

    L is the largest per-sample gradient norm seen at any step of any of
    the trajectories (probe points included). beta is the largest
    per-sample Hessian spectral norm found by power iteration at up to
    `n_ckpts` checkpoints and `n_samples` training points per trajectory.
    `extra` = (X, Y) adds points that are evaluated at every checkpoint for
    both constants. gamma_sc is passed through and is required for the
    strongly convex regime. probes = 0 skips the smoothness search and
    leaves beta unavailable (None).
    """
    if not isinstance(trajs, (list, tuple)):
        trajs = [trajs]
    _check_regime(regime)
    if regime == "strongly-convex" and not (gamma_sc and gamma_sc > 0):
        raise ConfigError("strongly-convex regime needs a positive strong-convexity constant")
    L2 = max(float(np.max(t.sqnorms[: t.steps + 1])) for t in trajs)
    for t in trajs:
        if t.probe_sqmax is not None and len(t.probe_sqmax):
            L2 = max(L2, float(t.probe_sqmax.max()))
    if probes == 0:
        n_samples, n_ckpts, extra_beta = 0, 0, False
    else:
        extra_beta = True
    beta = 0.0
    root = Rng(seed).child("beta")
    for k, tr in enumerate(trajs):
        prob = tr.problem
        ck = np.unique(np.linspace(0, len(tr.ckpt_steps) - 1, min(n_ckpts, len(tr.ckpt_steps))).astype(int))
        pts = np.unique(np.linspace(0, tr.n - 1, min(n_samples, tr.n)).astype(int))
        X = np.concatenate([prob.X[pts], extra[0]]) if extra is not None else prob.X[pts]
        Y = np.concatenate([prob.Y[pts], np.asarray(extra[1]).reshape(len(extra[0]), -1)]) \
            if extra is not None else prob.Y[pts]
        for s, w in zip(tr.ckpt_steps, tr.ckpt_params):
            if extra is not None:
                L2 = max(L2, float(prob.factor(w, *extra_xy(extra), step=s).sqnorms().max()))
        for c in ck if n_ckpts else []:
            w, s = tr.ckpt_params[c], tr.ckpt_steps[c]
            for i in range(len(X)):
                r = root.child(f"{k}/{c}/{i}")
                beta = max(beta, _hessian_norm(prob, w, X[i : i + 1], Y[i : i + 1], s, iters, r))
    L = math.sqrt(L2)
    return Constants(L, beta if extra_beta else None, gamma_sc)


def extra_xy(extra):
    X = np.atleast_2d(np.asarray(extra[0], dtype=np.float64))
    return X, np.asarray(extra[1], dtype=np.float64).reshape(len(X), -1)


# --- epsilon and slack -------------------------------------------------------------

def _reg_excess(regime, L2, beta, gamma_sc, T):
    if regime == "convex":
        return L2 * beta * T * T
    if regime == "strongly-convex":
        return 2.0 * L2 * beta * T / gamma_sc
    bt = beta * T
    if bt == 0.0:
        return 0.0
    return 2.0 * L2 / beta * (math.expm1(bt) - bt)


def epsilon_term(regime, consts, T, n, delta=0.05):
    """(epsilon, flags) for horizon T, sample size n and confidence delta."""
    _check_regime(regime, consts)
    if n < 1 or T < 0 or not 0 < delta < 1:
        raise ConfigError("need n >= 1, T >= 0 and delta in (0, 1)")
    L, beta = consts.L, consts.beta
    if beta is None:
        raise ConfigError("beta is unavailable (no smoothness probes); epsilon cannot be computed")
    L2 = L * L
    cap = 2.0 * L * math.sqrt(T / n)
    flags = []
    if regime == "non-convex" and beta * T > EXP_OVERFLOW:
        flags.append("exp-overflow: returned the sqrt(T/n) branch")
        return cap, flags
    c = _reg_excess(regime, L2, beta, consts.gamma_sc, T)
    Delta = L2 * T
    ln2n = math.log(2 * n)
    kex = (L2 * T + c) * (math.sqrt(2 * n * ln2n) + math.sqrt(2 * n * math.log(4 / delta))) \
        + L2 * T + 2 * c + math.log(2 / delta)
    E = kex + 4 * Delta * math.sqrt(6 * n * ln2n) + 8 * Delta
    eps = math.sqrt(E) / n + math.sqrt(n * L2 * T + E) / n ** 2
    if cap < eps:
        flags.append("sqrt(T/n) branch active")
        eps = cap
    return eps, flags


def slack_term(n, delta=0.05):
    return 3.0 * math.sqrt(math.log(4 * n / delta) / (2 * n))


def full_gf_bound(gamma, eps, n, delta=0.05):
    """(slack, total) with total = Gamma + epsilon + slack."""
    s = slack_term(n, delta)
    return s, gamma + eps + s


def sgf_remainder(T, n, delta, consts):
    """Everything but Gamma in the stochastic-flow bound over T unit intervals.

    Concentration over the interval-wise kernel classes plus, per interval,
    the epsilon-type correction with Delta = L^2.
    """
    if T < 0 or n < 2:
        raise ConfigError("need T >= 0 and n >= 2")
    L2 = consts.L ** 2
    conc = 3.0 * math.sqrt((T * math.log(n) + math.log(2 / delta)) / (2 * n))
    E = L2 * n + 4 * L2 * math.sqrt(6 * n * math.log(2 * n)) + 8 * L2
    per = math.sqrt(E) / n * (1.0 + 1.0 / n)
    return conc + T * per


# --- reports -----------------------------------------------------------------------

@dataclass
class BoundReport:
    gamma: float
    epsilon: float
    slack: float
    total: float
    gap: Optional[float]
    regime: str
    delta: float
    constants: dict
    warnings: list = field(default_factory=list)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def bound_report(gamma, consts, regime, T, n, delta=0.05, gap=None, warnings=()):
    eps, flags = epsilon_term(regime, consts, T, n, delta)
    slack, total = full_gf_bound(gamma, eps, n, delta)
    return BoundReport(
        gamma=float(gamma), epsilon=float(eps), slack=float(slack), total=float(total),
        gap=None if gap is None else float(gap), regime=regime, delta=delta,
        constants={"L": consts.L, "beta": consts.beta, "gamma_sc": consts.gamma_sc, "note": consts.note},
        warnings=list(warnings) + flags,
    )


def sgf_bound_report(gamma, consts, regime, T, n, delta=0.05, gap=None, warnings=()):
    rem = sgf_remainder(T, n, delta, consts)
    return BoundReport(
        gamma=float(gamma), epsilon=float(rem - sgf_remainder(0, n, delta, consts)),
        slack=float(sgf_remainder(0, n, delta, consts)), total=float(gamma + rem),
        gap=None if gap is None else float(gap), regime=regime, delta=delta,
        constants={"L": consts.L, "beta": consts.beta, "gamma_sc": consts.gamma_sc, "note": consts.note},
        warnings=list(warnings),
    )


# --- closed forms -----------------------------------------------------------------------

def ntk_corollary_bound(lam_max, lam_min, r0, n, T):
    """sqrt(2 lam_max ||r_0||^2 / (lam_min n) * (1 - exp(-2 lam_min T / n)))."""
    if not lam_min > 0 or lam_max < lam_min:
        raise ConfigError("need 0 < lam_min <= lam_max")
    return math.sqrt(2 * lam_max * r0 / (lam_min * n) * -math.expm1(-2 * lam_min * T / n))


@dataclass
class KRRResult:
    w_star: np.ndarray
    w_T: np.ndarray
    loss_drop: float
    total_sum: float  # sum_ij K_T(z_i, z_j)
    trace: float  # sum_i K_T(z_i, z_i)
    gamma: float
    gamma_rhs: Optional[float]
    gamma_rhs_dual: Optional[float]


def _h(mu, T):
    """int_0^T exp(-mu t) dt, elementwise."""
    mu = np.asarray(mu, dtype=np.float64)
    out = np.full(mu.shape, float(T))
    nz = np.abs(mu) > 1e-300
    out[nz] = -np.expm1(-mu[nz] * T) / mu[nz]
    return out


def krr_loss(Phi, y, lam, w):
    n = Phi.shape[1]
    r = Phi.T @ w - y
    return 0.5 * float(r @ r) / n + 0.5 * lam * float(w @ w)


def krr_closed_form(Phi, y, lam, T, w0=None):
    """Exact Gamma for gradient flow on (1/2n)||Phi^T w - y||^2 + (lam/2)||w||^2.

    Phi is p x n (features by samples). With lam = 0 the targets must be
    interpolable, either because K = Phi^T Phi is invertible or because y
    lies in the row space of Phi; otherwise a RankError is raised.
    """
    Phi = np.asarray(Phi, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    p, n = Phi.shape
    if len(y) != n:
        raise ConfigError(f"{n} samples but {len(y)} targets")
    if lam < 0:
        raise ConfigError("lam must be >= 0")
    w0 = np.zeros(p) if w0 is None else np.asarray(w0, dtype=np.float64)
    A = Phi @ Phi.T / n + lam * np.eye(p)
    eig = sym_eig(A)
    mu, V = eig.values, eig.vectors
    tol = 1e-10 * max(mu[0], 1e-300)
    inv = np.where(mu > tol, 1.0 / np.where(mu > tol, mu, 1.0), 0.0)
    rhs = Phi @ y / n
    w_star = V @ (inv * (V.T @ rhs))
    if lam == 0:
        fit = Phi.T @ w_star - y
        if np.linalg.norm(fit) > 1e-8 * max(1.0, np.linalg.norm(y)):
            raise RankError("lam = 0 needs interpolable targets (invertible K or y in the feature row space)")
    v = w0 - w_star
    wT = w_star + sym_expm_action(eig, T, v)
    drop = krr_loss(Phi, y, lam, w0) - krr_loss(Phi, y, lam, wT)
    vt = V.T @ v
    total = n * n * 0.5 * float(np.sum(mu * -np.expm1(-2 * mu * T) * vt * vt))

    # per-sample gradient g_i(t) = r_i + M_i e^{-At} v with M_i = phi_i phi_i^T + lam I
    sq = np.sum(Phi * Phi, axis=0)
    resid = Phi.T @ w_star - y
    R = Phi * resid[None, :] + lam * w_star[:, None]  # columns r_i
    b = Phi @ (resid * sq + lam * resid) + lam * (Phi @ (Phi.T @ w_star)) + n * lam * lam * w_star
    Q = (Phi * sq[None, :]) @ Phi.T + 2 * lam * Phi @ Phi.T + n * lam * lam * np.eye(p)
    Qt = V.T @ Q @ V
    H = _h(mu[:, None] + mu[None, :], T)
    trace = T * float(np.sum(R * R)) + 2 * float((V.T @ b) @ (_h(mu, T) * vt)) + float(vt @ (Qt * H) @ vt)
    gamma = 2.0 / n * math.sqrt(max(drop, 0.0)) * math.sqrt(max(trace, 0.0))
    rhs4 = dual = None
    if lam == 0:
        kmax = float(sq.max())
        rhs4 = math.sqrt(kmax) * np.linalg.norm(v) * np.linalg.norm(Phi.T @ v) / n
        if not np.any(w0):
            K = Phi.T @ Phi
            Keig = sym_eig(K)
            kinv = np.where(Keig.values > 1e-10 * Keig.values[0], 1.0 / np.maximum(Keig.values, 1e-300), 0.0)
            yKy = float(np.sum(kinv * (Keig.vectors.T @ y) ** 2))
            dual = math.sqrt(kmax) * math.sqrt(yKy) * np.linalg.norm(y) / n
    return KRRResult(w_star, wT, float(drop), float(total), float(trace), gamma, rhs4, dual)
