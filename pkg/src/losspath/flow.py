"""Explicit Euler integration of (stochastic) gradient flow with recording.

At every step the integrator records, from one forward pass, the training
loss, every per-sample squared gradient norm and the squared norm of the
step direction. These are the left-endpoint Riemann summands of the loss
path kernel diagonal and of its total sum. Optionally it also records
full per-sample Gram blocks, kernel-machine digests for probe points, and
parameter checkpoints.

Stochastic gradient flow uses unit time intervals: interval t holds 1/eta
Euler steps that all use the same minibatch S_t.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DivergenceError, FormatError, NumericError, ResourceError
from .model import (
    LossSpec,
    ModelSpec,
    SingleIndexSpec,
    factored,
    single_index_factored,
)
from .numkit import Rng, rng_choice, rng_gaussian, rng_rademacher

FULL_GRAM_MAX_N = 2048
RECORD_LEVELS = ("gamma", "full")


@dataclass(frozen=True)
class FlowConfig:
    eta: float
    T: float
    batch: int = 0  # minibatch size for SGF, 0 = full batch
    checkpoint_every: int = 0  # 0 = max(1, steps // 512)
    record: str = "gamma"

    def __post_init__(self):
        if not (self.eta > 0 and np.isfinite(self.eta)):
            raise ConfigError(f"step size must be positive, got {self.eta}")
        if not (self.T >= 0 and np.isfinite(self.T)):
            raise ConfigError(f"horizon must be >= 0, got {self.T}")
        if self.record not in RECORD_LEVELS:
            raise ConfigError(f"record level must be one of {RECORD_LEVELS}")

    @property
    def steps(self):
        s = int(round(self.T / self.eta))
        if abs(s * self.eta - self.T) > 1e-9 * max(self.T, 1.0):
            raise ConfigError(f"T/eta = {self.T / self.eta} is not an integer")
        return s

    @property
    def steps_per_interval(self):
        s = int(round(1.0 / self.eta))
        if abs(s * self.eta - 1.0) > 1e-9:
            raise ConfigError(f"1/eta = {1.0 / self.eta} is not an integer")
        return s

    @property
    def stride(self):
        return self.checkpoint_every or max(1, self.steps // 512)


class Problem:
    """A model, a loss and a training set, with the parameter update rule."""

    def __init__(self, spec: ModelSpec, loss: LossSpec, X, Y):
        self.spec, self.loss = spec, loss
        self.X = np.asarray(X, dtype=np.float64)
        self.Y = np.asarray(Y, dtype=np.float64).reshape(len(self.X), -1)

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def n_params(self):
        return self.spec.n_params

    def digest(self):
        return self.spec.digest()

    def factor(self, w, X=None, Y=None, step=0):
        if X is None:
            X, Y = self.X, self.Y
        return factored(self.spec, self.loss, w, X, Y)

    def losses(self, w, X, Y, step=0):
        return self.factor(w, X, Y, step).losses

    def update(self, w, g, eta, step):
        return w - eta * g


@dataclass
class Trajectory:
    problem: Problem
    config: FlowConfig
    mode: str
    w0: np.ndarray
    wT: Optional[np.ndarray] = None
    steps: int = 0
    losses: Optional[np.ndarray] = None  # (steps + 1,)
    sqnorms: Optional[np.ndarray] = None  # (steps + 1, n); last row is at w_T
    step_sq: Optional[np.ndarray] = None  # (steps,) squared norm of each step direction
    schedule: Optional[np.ndarray] = None  # (intervals, m) for SGF
    ckpt_steps: list = field(default_factory=list)
    ckpt_params: list = field(default_factory=list)
    segments: list = field(default_factory=list)  # (s0, s1, sum of J J^T) in full mode
    probe_X: Optional[np.ndarray] = None
    probe_Y: Optional[np.ndarray] = None
    probe_dots: Optional[np.ndarray] = None  # (steps, P): <grad l(w_s, z_p), step direction>
    probe_loss0: Optional[np.ndarray] = None
    probe_lossT: Optional[np.ndarray] = None
    probe_gram: Optional[np.ndarray] = None  # eta * sum_s P_s P_s^T
    probe_cross: Optional[np.ndarray] = None  # eta * sum_s P_s J_s^T (full mode)
    probe_sqmax: Optional[np.ndarray] = None  # largest squared probe gradient norm seen
    warnings: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def eta(self):
        return self.config.eta

    @property
    def n(self):
        return self.problem.n

    @property
    def times(self):
        return np.arange(self.steps + 1) * self.eta

    @property
    def loss_drop(self):
        return float(self.losses[0] - self.losses[self.steps])

    def batch_of(self, s):
        if self.schedule is None:
            return None
        return self.schedule[s // self.config.steps_per_interval]


def make_schedule(n, m, intervals, rng):
    """One minibatch of m distinct indices per unit interval."""
    if not 1 <= m <= n:
        raise ConfigError(f"batch size must lie in [1, {n}], got {m}")
    if m == n:
        return np.tile(np.arange(n), (intervals, 1))
    return np.stack([rng_choice(rng.child(f"batch/{t}"), n, m) for t in range(intervals)]) if intervals else np.zeros((0, m), dtype=int)


def _curvature_along(problem, w, g):
    """Finite-difference Rayleigh quotient of the empirical Hessian along g."""
    gn = np.linalg.norm(g)
    if gn == 0:
        return 0.0
    if not np.isfinite(gn):
        return float("inf")
    u = g / gn
    h = 1e-5
    try:
        gp = problem.factor(w + h * u).mean()
        gm = problem.factor(w - h * u).mean()
    except NumericError:
        return float("inf")
    return float(u @ (gp - gm) / (2 * h))


def _integrate(problem, cfg, w0, schedule=None, probes=None, check_curvature=True):
    steps = cfg.steps
    n = problem.n
    full = cfg.record == "full"
    if full and n > FULL_GRAM_MAX_N:
        raise ResourceError(f"full-gram recording is limited to n <= {FULL_GRAM_MAX_N}")
    mode = "gf" if schedule is None else "sgf"
    if mode == "sgf":
        spi = cfg.steps_per_interval
        if steps % spi:
            raise ConfigError("SGF horizon must be a whole number of unit intervals")
        if len(schedule) != steps // spi:
            raise ConfigError(f"schedule has {len(schedule)} intervals, need {steps // spi}")
        full_batch = schedule.shape[1] == n
        seg_len = spi
    else:
        seg_len = cfg.stride
    w = np.array(w0, dtype=np.float64, copy=True)
    if w.shape != (problem.n_params,):
        raise ConfigError(f"initial parameters must have {problem.n_params} entries")
    tr = Trajectory(problem, cfg, mode, w.copy(), schedule=schedule)
    tr.steps = steps
    tr.losses = np.empty(steps + 1)
    tr.sqnorms = np.empty((steps + 1, n))
    tr.step_sq = np.empty(steps)
    if probes is not None:
        Xp, Yp = probes
        tr.probe_X = np.asarray(Xp, dtype=np.float64)
        tr.probe_Y = np.asarray(Yp, dtype=np.float64).reshape(len(tr.probe_X), -1)
        P = len(tr.probe_X)
        tr.probe_dots = np.empty((steps, P))
        tr.probe_sqmax = np.zeros(P)
        tr.probe_gram = np.zeros((P, P))
        if full:
            tr.probe_cross = np.zeros((P, n))
    seg = None
    stride = cfg.stride

    for s in range(steps):
        try:
            fac = problem.factor(w, step=s)
        except NumericError as e:
            raise DivergenceError(f"step {s}: {e}", step=s, partial=tr) from e
        L = float(np.mean(fac.losses))
        tr.losses[s] = L
        tr.sqnorms[s] = fac.sqnorms()
        if not (np.isfinite(L) and np.all(np.isfinite(tr.sqnorms[s]))):
            tr.steps = s
            raise DivergenceError(f"non-finite loss or gradient at step {s}", step=s, partial=tr)
        idx = None
        if mode == "sgf" and not full_batch:
            idx = schedule[s // spi]
        g = fac.mean(idx)
        tr.step_sq[s] = g @ g
        if s == 0 and check_curvature and steps:
            rq = _curvature_along(problem, w, g)
            if cfg.eta * rq > 2.0:
                tr.warnings.append(f"eta * curvature = {cfg.eta * rq:.3g} > 2 at start")
        if s > 0 and mode == "gf" and L > tr.losses[s - 1] * (1 + 1e-12) + 1e-300:
            if not any(m.startswith("loss increased") for m in tr.warnings):
                tr.warnings.append(f"loss increased at step {s}")
        if full:
            if s % seg_len == 0:
                seg = [s, s, np.zeros((n, n))]
                tr.segments.append(seg)
            seg[1] = s + 1
            seg[2] += fac.gram()
        if probes is not None:
            pf = problem.factor(w, tr.probe_X, tr.probe_Y, step=s)
            if s == 0:
                tr.probe_loss0 = pf.losses.copy()
            tr.probe_dots[s] = pf.dot(g)
            pg = pf.gram()
            tr.probe_sqmax = np.maximum(tr.probe_sqmax, np.diag(pg))
            tr.probe_gram += cfg.eta * pg
            if full:
                tr.probe_cross += cfg.eta * pf.cross(fac)
        if s % stride == 0:
            tr.ckpt_steps.append(s)
            tr.ckpt_params.append(w.copy())
        w = problem.update(w, g, cfg.eta, s)
        if not np.all(np.isfinite(w)):
            tr.steps = s
            raise DivergenceError(f"non-finite parameters after step {s}", step=s, partial=tr)

    try:
        fac = problem.factor(w, step=steps)
    except NumericError as e:
        raise DivergenceError(f"final point: {e}", step=steps, partial=tr) from e
    tr.losses[steps] = float(np.mean(fac.losses))
    tr.sqnorms[steps] = fac.sqnorms()
    if not (np.isfinite(tr.losses[steps]) and np.all(np.isfinite(tr.sqnorms[steps]))):
        raise DivergenceError("non-finite loss or gradient at the final point", step=steps, partial=tr)
    if probes is not None:
        pf = problem.factor(w, tr.probe_X, tr.probe_Y, step=steps)
        tr.probe_lossT = pf.losses.copy()
        if steps == 0:
            tr.probe_loss0 = pf.losses.copy()
    if not tr.ckpt_steps or tr.ckpt_steps[-1] != steps:
        tr.ckpt_steps.append(steps)
        tr.ckpt_params.append(w.copy())
    tr.wT = w
    return tr


def integrate_gf(problem, cfg, w0, probes=None):
    """Full-batch gradient flow by explicit Euler steps w <- w - eta grad L_S(w)."""
    return _integrate(problem, cfg, w0, None, probes)


def integrate_sgf(problem, cfg, w0, rng=None, schedule=None, probes=None):
    """Stochastic gradient flow: Euler steps on the interval minibatch loss."""
    m = cfg.batch or problem.n
    intervals = cfg.steps // cfg.steps_per_interval
    if schedule is None:
        if rng is None:
            raise ConfigError("SGF needs an rng or an explicit schedule")
        schedule = make_schedule(problem.n, m, intervals, rng)
    return _integrate(problem, cfg, w0, np.asarray(schedule), probes)


def replay(tr):
    """Re-run the recorded integration, yielding (step, w_s, step direction)."""
    w = tr.w0.copy()
    prob = tr.problem
    for s in range(tr.steps):
        fac = prob.factor(w, step=s)
        g = fac.mean(tr.batch_of(s) if tr.mode == "sgf" and tr.schedule.shape[1] != tr.n else None)
        yield s, w, g
        w = prob.update(w, g, tr.eta, s)


# --- single-index two-stage flow --------------------------------------------------

def sphere_step(theta, g, eta):
    """Riemannian gradient step on the unit sphere followed by renormalisation."""
    g_t = g - (theta @ g) * theta
    v = theta - eta * g_t
    nv = np.linalg.norm(v)
    if not nv > 0:
        raise NumericError("sphere step collapsed to the zero vector")
    return v / nv


class SingleIndexProblem(Problem):
    """theta on the sphere, output weights c frozen until step `switch`."""

    def __init__(self, spec: SingleIndexSpec, X, y, sigma, b, switch):
        self.spec = spec
        self.loss = None
        self.X = np.asarray(X, dtype=np.float64)
        self.Y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
        self.sigma, self.b = sigma, b
        self.switch = switch

    @property
    def n_params(self):
        return self.spec.n_params

    def digest(self):
        return f"single-index-{self.spec.d}-{self.spec.width}"

    def factor(self, w, X=None, Y=None, step=0):
        if X is None:
            X, Y = self.X, self.Y
        d = self.spec.d
        return single_index_factored(self.spec, w[:d], w[d:], self.sigma, self.b,
                                     X, np.asarray(Y).reshape(-1), step >= self.switch)

    def update(self, w, g, eta, step):
        d = self.spec.d
        theta = sphere_step(w[:d], g[:d], eta)
        c = w[d:] - eta * g[d:] if step >= self.switch else w[d:]
        return np.concatenate([theta, c])


def single_index_init(spec, rng, rho=1.0, n_active=None):
    """theta uniform on the sphere; c with ||c|| = rho and n_active non-zeros."""
    theta = rng_gaussian(rng.child("theta"), spec.d)
    theta /= np.linalg.norm(theta)
    k = spec.width if n_active is None else n_active
    if not 1 <= k <= spec.width:
        raise ConfigError(f"active output units must lie in [1, {spec.width}]")
    c = np.zeros(spec.width)
    sel = rng_choice(rng.child("support"), spec.width, k)
    c[sel] = rng_gaussian(rng.child("c"), k)
    c *= rho / np.linalg.norm(c)
    sigma = rng_rademacher(rng.child("sigma"), spec.width)
    b = rng_gaussian(rng.child("bias"), spec.width, spec.tau)
    return np.concatenate([theta, c]), sigma, b


def integrate_two_stage(spec, X, y, cfg, T0, rng, rho=1.0, n_active=None, theta_star=None, probes=None):
    """Train theta alone up to time T0, then theta and c jointly up to T."""
    if not 0 <= T0 <= cfg.T:
        raise ConfigError(f"switch time T0 must lie in [0, T], got {T0}")
    w0, sigma, b = single_index_init(spec, rng, rho, n_active)
    switch = int(round(T0 / cfg.eta))
    prob = SingleIndexProblem(spec, X, y, sigma, b, switch)
    tr = _integrate(prob, cfg, w0, None, probes, check_curvature=False)
    tr.extra["switch_step"] = switch
    if theta_star is not None:
        ts = np.asarray(theta_star)
        tr.extra["overlap"] = np.array([abs(w[: spec.d] @ ts) for w in tr.ckpt_params])
    return tr


# --- export -----------------------------------------------------------------------------

def write_trace_csv(tr, path):
    """Columns: step, time, train_loss, grad_norm_sq_sum, checkpoint_id."""
    ck = {s: i for i, s in enumerate(tr.ckpt_steps)}
    with open(path, "w") as fh:
        fh.write("step,time,train_loss,grad_norm_sq_sum,checkpoint_id\n")
        for s in range(tr.steps + 1):
            fh.write(f"{s},{float(s * tr.eta)!r},{float(tr.losses[s])!r},{float(tr.sqnorms[s].sum())!r},{ck.get(s, -1)}\n")


def write_checkpoints(tr, folder):
    """Raw little-endian float64 parameter dumps with JSON sidecars."""
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    digest = tr.problem.digest()
    for i, (s, w) in enumerate(zip(tr.ckpt_steps, tr.ckpt_params)):
        np.asarray(w, dtype="<f8").tofile(folder / f"ckpt_{i:05d}.bin")
        meta = {"spec_hash": digest, "step": int(s), "time": s * tr.eta, "n_params": int(len(w))}
        (folder / f"ckpt_{i:05d}.json").write_text(json.dumps(meta, sort_keys=True))


def read_checkpoint(path, spec_hash=None):
    path = Path(path)
    side = path.with_suffix(".json")
    try:
        meta = json.loads(side.read_text())
        w = np.fromfile(path, dtype="<f8")
    except (OSError, ValueError) as e:
        raise FormatError(f"cannot read checkpoint {path}: {e}") from e
    if len(w) != meta.get("n_params", -1):
        raise FormatError(f"{path}: {len(w)} values, sidecar says {meta.get('n_params')}")
    if spec_hash is not None and meta.get("spec_hash") != spec_hash:
        raise FormatError(f"{path}: checkpoint belongs to model {meta.get('spec_hash')}, not {spec_hash}")
    return w.astype(np.float64), meta
