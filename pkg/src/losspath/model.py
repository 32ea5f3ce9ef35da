"""Parametric models, losses and per-sample gradients.

Three model kinds share one flat parameter vector layout:

  linear    f(x) = W x                     W: k x d
  features  f(x) = W phi(x)                W: k x q, phi from FEATURES
  mlp2      f(x) = s C act(W1 x + b1)      W1: N x d, b1: N, C: k x N

with s = 1 (standard) or 1/sqrt(N) (ntk scaling). The flat layout is
[W1 row-major, b1, C] for mlp2 and [W] for the others.

Every per-sample gradient of these models is a sum of outer products
L_i (x) R_i, one per parameter block. `Factored` keeps those factors so
that norms, Gram blocks and dot products never build the n x p Jacobian.
"""
from __future__ import annotations

import functools
import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .numkit import Rng, rng_gaussian, rng_uniform

KINDS = ("linear", "features", "mlp2")
ACTIVATIONS = ("softplus", "relu")
SCALINGS = ("standard", "ntk")
LOSSES = ("square", "logistic", "reg-square")


# --- feature maps ---------------------------------------------------------

def _identity_features(d, q, seed, bandwidth=1.0):
    if q not in (0, d):
        raise ConfigError(f"identity features need feature_dim == d_in ({d})")
    return lambda X: X


def _rff_features(d, q, seed, bandwidth=1.0):
    """cos features whose inner products approximate exp(-|x - x'|^2 / (2 bandwidth^2))."""
    r = Rng(seed).child("rff")
    omega = rng_gaussian(r.child("omega"), (q, d), std=1.0 / bandwidth)
    phase = rng_uniform(r.child("phase"), q, 0.0, 2 * np.pi)
    scale = np.sqrt(2.0 / q)
    return lambda X: scale * np.cos(X @ omega.T + phase)


def _relu_features(d, q, seed, bandwidth=1.0):
    omega = rng_gaussian(Rng(seed).child("relu-rf"), (q, d), std=1.0 / np.sqrt(d))
    scale = 1.0 / np.sqrt(q)
    return lambda X: scale * np.maximum(X @ omega.T, 0.0)


FEATURES = {
    "identity": _identity_features,
    "rff": _rff_features,
    "relu": _relu_features,
}


@functools.lru_cache(maxsize=32)
def _cached_features(name, d, q, seed, bandwidth=1.0):
    return FEATURES[name](d, q, seed, bandwidth)


# --- specs ----------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    kind: str
    d_in: int
    d_out: int = 1
    width: int = 0
    activation: str = "softplus"
    scaling: str = "standard"
    feature: str = "identity"
    feature_dim: int = 0
    feature_seed: int = 0
    bandwidth: float = 1.0  # rff only
    freeze_first: bool = False
    freeze_bias: bool = False
    freeze_output: bool = False
    zero_init: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.d_in < 1 or self.d_out < 1:
            raise ConfigError("d_in and d_out must be positive")
        if self.kind == "mlp2" and self.width < 1:
            raise ConfigError("mlp2 needs width >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.scaling not in SCALINGS:
            raise ConfigError(f"unknown scaling {self.scaling!r}")
        if self.kind == "features" and self.feature not in FEATURES:
            raise ConfigError(f"unknown feature map {self.feature!r}")
        if not self.bandwidth > 0:
            raise ConfigError("feature bandwidth must be positive")

    @property
    def q(self):
        if self.kind == "features" and self.feature != "identity":
            return self.feature_dim
        return self.d_in

    def blocks(self):
        """(name, shape, trainable) for each parameter block in layout order."""
        if self.kind == "mlp2":
            N, d, k = self.width, self.d_in, self.d_out
            return [
                ("W1", (N, d), not self.freeze_first),
                ("b1", (N,), not self.freeze_bias),
                ("C", (k, N), not self.freeze_output),
            ]
        return [("W", (self.d_out, self.q), True)]

    @property
    def n_params(self):
        return sum(int(np.prod(s)) for _, s, _ in self.blocks())

    def mask(self):
        return np.concatenate(
            [np.full(int(np.prod(s)), 1.0 if tr else 0.0) for _, s, tr in self.blocks()]
        )

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def feature_map(self):
        return _cached_features(self.feature, self.d_in, self.feature_dim, self.feature_seed,
                                self.bandwidth)


@dataclass(frozen=True)
class LossSpec:
    """Loss kind, ridge weight (reg-square only) and an optional loss cap.

    Losses are used raw by default; `cap` divides them (and their
    gradients) by a user-supplied bound for bounded-loss studies.
    """

    kind: str = "square"
    lam: float = 0.0
    cap: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSSES:
            raise ConfigError(f"unknown loss {self.kind!r}")
        if self.lam < 0:
            raise ConfigError("regularisation strength must be >= 0")
        if not self.cap > 0:
            raise ConfigError("loss cap must be positive")

    @property
    def reg(self):
        return self.lam if self.kind == "reg-square" else 0.0


# --- parameters -------------------------------------------------------------

def unpack(spec, w):
    """Views into the flat vector, one per block."""
    w = np.asarray(w)
    if w.shape != (spec.n_params,):
        raise ShapeError(f"expected {spec.n_params} parameters, got shape {w.shape}")
    out, at = {}, 0
    for name, shape, _ in spec.blocks():
        size = int(np.prod(shape))
        out[name] = w[at : at + size].reshape(shape)
        at += size
    return out


def init_params(spec, rng):
    """Gaussian init, std 1/sqrt(fan_in) (standard) or 1 (ntk); zeros if asked."""
    if spec.zero_init:
        return np.zeros(spec.n_params)
    ntk = spec.scaling == "ntk"
    parts = []
    for name, shape, _ in spec.blocks():
        if spec.kind == "mlp2":
            fan_in = spec.d_in if name in ("W1", "b1") else spec.width
        else:
            fan_in = spec.q
        std = 1.0 if ntk else 1.0 / np.sqrt(fan_in)
        parts.append(rng_gaussian(rng.child(name), shape, std).ravel())
    return np.concatenate(parts)


def _act(name, h):
    if name == "softplus":
        e = np.exp(-np.abs(h))
        return np.maximum(h, 0.0) + np.log1p(e), np.where(h >= 0, 1.0, e) / (1.0 + e)
    return np.maximum(h, 0.0), (h > 0).astype(np.float64)


def _out_scale(spec):
    return 1.0 / np.sqrt(spec.width) if spec.scaling == "ntk" else 1.0


# --- forward and losses ------------------------------------------------------

def _forward_cache(spec, w, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.d_in:
        raise ShapeError(f"inputs must be (n, {spec.d_in}), got {X.shape}")
    P = unpack(spec, w)
    if spec.kind == "mlp2":
        H = X @ P["W1"].T + P["b1"]
        if not np.all(np.isfinite(H)):
            raise NumericError("non-finite pre-activations in layer 1")
        A, dA = _act(spec.activation, H)
        F = _out_scale(spec) * (A @ P["C"].T)
        if not np.all(np.isfinite(F)):
            raise NumericError("non-finite outputs in layer 2")
        return F, {"X": X, "H": H, "A": A, "dA": dA, "P": P}
    R = X if spec.kind == "linear" else _features_of(spec, X)
    F = R @ P["W"].T
    if not np.all(np.isfinite(F)):
        raise NumericError("non-finite outputs in layer 1")
    return F, {"X": X, "R": R, "P": P}


_FEATURE_MEMO = []  # (X, key, R); holding X keeps its buffer from being reused


def _features_of(spec, X):
    """Feature map output, reused while the same input array is passed again."""
    key = (spec.feature, spec.d_in, spec.feature_dim, spec.feature_seed, spec.bandwidth)
    for Xm, km, R in _FEATURE_MEMO:
        if Xm is X and km == key:
            return R
    R = spec.feature_map()(X)
    R.setflags(write=False)
    _FEATURE_MEMO.insert(0, (X, key, R))
    del _FEATURE_MEMO[4:]
    return R


def forward(spec, w, X):
    """Model outputs, shape (n, d_out)."""
    return _forward_cache(spec, w, X)[0]


def _as_targets(spec, Y, n):
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape != (n, spec.d_out):
        raise ShapeError(f"targets must be ({n}, {spec.d_out}), got {Y.shape}")
    return Y


def _loss_and_slope(loss, F, Y):
    """Per-sample data loss and dloss/df, divided by the loss cap."""
    if loss.kind == "logistic":
        if F.shape[1] != 1:
            raise ConfigError("logistic loss needs a scalar output")
        m = Y * F
        val = np.logaddexp(0.0, -m)[:, 0]
        slope = -Y * 0.5 * (1.0 - np.tanh(0.5 * m))
    else:
        slope = F - Y
        val = 0.5 * np.sum(slope * slope, axis=1)
    if loss.cap != 1.0:
        return val / loss.cap, slope / loss.cap
    return val, slope


def sample_losses(spec, loss, w, X, Y):
    F = forward(spec, w, X)
    val, _ = _loss_and_slope(loss, F, _as_targets(spec, Y, F.shape[0]))
    if loss.reg:
        val = val + 0.5 * loss.reg / loss.cap * np.sum((spec.mask() * w) ** 2)
    return val


def empirical_loss(spec, loss, w, X, Y):
    return float(np.mean(sample_losses(spec, loss, w, X, Y)))


# --- factored per-sample gradients ---------------------------------------------

_ROWSQ_MEMO = []  # (R, row norms) for recently seen input matrices


def _row_sq(R):
    """Squared row norms, reused for recently seen input matrices."""
    for Rm, q in _ROWSQ_MEMO:
        if Rm is R:
            return q
    q = np.einsum("ij,ij->i", R, R)
    return q


def _remember_rows(X):
    for Rm, _ in _ROWSQ_MEMO:
        if Rm is X:
            return
    _ROWSQ_MEMO.insert(0, (X, np.einsum("ij,ij->i", X, X)))
    del _ROWSQ_MEMO[4:]


class Factored:
    """Per-sample gradients g_i = sum_b vec(L_b[i] outer R_b[i]) + lam * w_masked.

    `blocks` holds (offset, L, R) for every trainable block. Frozen blocks
    are simply absent, so their gradient entries are zero.
    """

    def __init__(self, n_params, blocks, reg_vec, losses, outputs):
        self.p = n_params
        self.blocks = blocks
        self.reg_vec = reg_vec  # lam * masked w, or None
        self.losses = losses
        self.outputs = outputs
        self.n = len(losses)

    def _data_sqnorms(self):
        out = np.zeros(self.n)
        for _, L, R in self.blocks:
            out += np.einsum("ij,ij->i", L, L) * _row_sq(R)
        return out

    def dot(self, v):
        """<g_i, v> for every sample."""
        v = np.asarray(v, dtype=np.float64)
        out = np.zeros(self.n)
        for off, L, R in self.blocks:
            V = v[off : off + L.shape[1] * R.shape[1]].reshape(L.shape[1], R.shape[1])
            out += np.einsum("ib,ib->i", L @ V, R)
        if self.reg_vec is not None:
            out += float(self.reg_vec @ v)
        return out

    def sqnorms(self):
        out = self._data_sqnorms()
        if self.reg_vec is not None:
            r = self.reg_vec
            out += 2.0 * self._data_dot(r) + float(r @ r)
        return out

    def _data_dot(self, v):
        if self.reg_vec is None:
            return self.dot(v)
        return self.dot(v) - float(self.reg_vec @ v)

    def cross(self, other):
        """Gram block <g_i, h_j> between two factored sets on the same model."""
        G = np.zeros((self.n, other.n))
        for (oa, La, Ra), (ob, Lb, Rb) in zip(self.blocks, other.blocks):
            if oa != ob:
                raise ShapeError("factored gradients come from different layouts")
            G += (La @ Lb.T) * (Ra @ Rb.T)
        if self.reg_vec is not None:
            r = self.reg_vec
            G += self._data_dot(r)[:, None] + other._data_dot(r)[None, :] + float(r @ r)
        return G

    def gram(self):
        G = self.cross(self)
        return 0.5 * (G + G.T)

    def mean(self, idx=None):
        """Mean gradient over all samples or over the rows in idx."""
        g = np.zeros(self.p)
        for off, L, R in self.blocks:
            if idx is not None:
                L, R = L[idx], R[idx]
            m = L.shape[0]
            g[off : off + L.shape[1] * R.shape[1]] = (L.T @ R).ravel() / m
        if self.reg_vec is not None:
            g += self.reg_vec
        return g

    def explicit(self):
        """Materialised n x p Jacobian of per-sample losses."""
        J = np.zeros((self.n, self.p))
        for off, L, R in self.blocks:
            size = L.shape[1] * R.shape[1]
            J[:, off : off + size] = (L[:, :, None] * R[:, None, :]).reshape(self.n, size)
        if self.reg_vec is not None:
            J += self.reg_vec
        return J


def _factor_from_slope(spec, w, cache, slope):
    blocks, offsets, at = {}, {}, 0
    for name, shape, _ in spec.blocks():
        offsets[name] = at
        at += int(np.prod(shape))
    trainable = {name: tr for name, _, tr in spec.blocks()}
    out = []
    if spec.kind == "mlp2":
        s = _out_scale(spec)
        delta = s * (slope @ cache["P"]["C"]) * cache["dA"]
        n = delta.shape[0]
        _remember_rows(cache["X"])
        blocks["W1"] = (delta, cache["X"])
        blocks["b1"] = (delta, np.ones((n, 1)))
        blocks["C"] = (s * slope, cache["A"])
    else:
        _remember_rows(cache["R"])
        blocks["W"] = (slope, cache["R"])
    for name, _, _ in spec.blocks():
        if trainable[name]:
            L, R = blocks[name]
            out.append((offsets[name], L, R))
    return out


def factored(spec, loss, w, X, Y):
    """Forward pass plus factored per-sample gradients of the loss."""
    w = np.asarray(w, dtype=np.float64)
    F, cache = _forward_cache(spec, w, X)
    Y = _as_targets(spec, Y, F.shape[0])
    val, slope = _loss_and_slope(loss, F, Y)
    reg_vec = None
    if loss.reg:
        wm = spec.mask() * w
        reg_vec = loss.reg / loss.cap * wm
        val = val + 0.5 * loss.reg / loss.cap * float(wm @ wm)
    return Factored(spec.n_params, _factor_from_slope(spec, w, cache, slope), reg_vec, val, F)


def output_factored(spec, w, X, out=0):
    """Factored gradients of output `out` of f itself (no loss)."""
    F, cache = _forward_cache(spec, w, X)
    slope = np.zeros_like(F)
    slope[:, out] = 1.0
    return Factored(spec.n_params, _factor_from_slope(spec, w, cache, slope), None, np.zeros(len(F)), F)


def per_sample_grads(spec, loss, w, X, Y):
    """Explicit n x p matrix of per-sample loss gradients."""
    return factored(spec, loss, w, X, Y).explicit()


def per_sample_grad(spec, loss, w, x, y):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(1, -1)
    return per_sample_grads(spec, loss, w, x, y)[0]


def batch_grad(spec, loss, w, X, Y, idx=None):
    """Mean loss gradient over the rows in idx (all samples when idx is None)."""
    if idx is not None:
        idx = np.sort(np.asarray(idx, dtype=int))
        if idx.size == 0:
            raise ConfigError("batch gradient over an empty index set")
        if idx[0] < 0 or idx[-1] >= len(X):
            raise ConfigError(f"batch indices out of range for n = {len(X)}")
    return factored(spec, loss, w, X, Y).mean(idx)


def ntk_gram(spec, w, X):
    """Empirical tangent kernel <grad_w f(x_i), grad_w f(x_j)> for scalar outputs."""
    if spec.d_out != 1:
        raise ConfigError("ntk_gram supports scalar-output models only")
    return output_factored(spec, w, X).gram()


def grad_check(spec, loss, w, x, y, eps=1e-5, coords=None, rng=None):
    """Max over coordinates of |analytic - central difference| / (|analytic| + 1e-8).

    Only trainable coordinates are compared: all of them when `coords` is
    None, a random subset when it is an int, or the given indices. The
    difference quotient is evaluated in extended precision so that
    cancellation does not swamp small gradient entries.
    """
    w = np.asarray(w, dtype=np.float64)
    x = np.atleast_2d(x)
    y = np.asarray(y, dtype=np.float64).reshape(1, -1)
    ana = per_sample_grad(spec, loss, w, x, y)
    live = np.flatnonzero(spec.mask())
    if coords is None:
        coords = live
    elif isinstance(coords, int):
        pick = np.random.default_rng(0 if rng is None else rng)
        coords = np.sort(pick.choice(live, size=min(coords, len(live)), replace=False))
    wl = w.astype(np.longdouble)
    h = np.longdouble(eps)
    err = 0.0
    for c in coords:
        wp, wm = wl.copy(), wl.copy()
        wp[c] += h
        wm[c] -= h
        num = (sample_losses(spec, loss, wp, x, y)[0] - sample_losses(spec, loss, wm, x, y)[0]) / (wp[c] - wm[c])
        err = max(err, float(abs(ana[c] - num) / (abs(ana[c]) + 1e-8)))
    return err


# --- single-index student ----------------------------------------------------------

@dataclass(frozen=True)
class SingleIndexSpec:
    """Two-layer student f(theta, c; x) = N^-1/2 sum_i c_i relu(sigma_i <theta, x> + b_i).

    theta lives on the unit sphere; sigma (Rademacher) and b ~ N(0, tau^2)
    are frozen. Loss is mean (f - y)^2 + lam ||c||^2.
    """

    d: int
    width: int
    lam: float = 1e-3
    tau: float = 1.5

    @property
    def n_params(self):
        return self.d + self.width


def single_index_forward(spec, theta, c, sigma, b, X):
    u = X @ theta
    H = sigma[None, :] * u[:, None] + b[None, :]
    A = np.maximum(H, 0.0)
    f = A @ c / np.sqrt(spec.width)
    return f, u, H, A


def single_index_factored(spec, theta, c, sigma, b, X, y, train_c):
    """Factored per-sample gradients of (f - y)^2 + lam ||c||^2.

    The theta part is projected onto the tangent space of the sphere; the
    c part is present only when c is being trained.
    """
    f, u, H, A = single_index_forward(spec, theta, c, sigma, b, X)
    r = f - y
    sN = np.sqrt(spec.width)
    coef = 2.0 * r * (((H > 0) * sigma[None, :]) @ c) / sN
    Xt = X - u[:, None] * theta[None, :]
    blocks = [(0, coef[:, None], Xt)]
    reg_vec = None
    if train_c:
        blocks.append((spec.d, (2.0 * r / sN)[:, None], A))
        reg_vec = np.concatenate([np.zeros(spec.d), 2.0 * spec.lam * c])
    losses = r * r + spec.lam * float(c @ c)
    return Factored(spec.n_params, blocks, reg_vec, losses, f[:, None])
