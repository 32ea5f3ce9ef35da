"""Small dense linear algebra kit and deterministic random streams.

Everything is float64. The eigensolver is a cyclic Jacobi method with a
round-robin pair ordering, so that each round applies n/2 disjoint
rotations at once as vectorised row and column updates.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import NumericError, ShapeError

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


def as_matrix(a, name="matrix"):
    """Return `a` as a finite 2-D float64 array."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name}: expected 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name}: non-finite entries")
    return a


def gram(J):
    """Gram matrix J J^T of the rows of J, exactly symmetric."""
    J = as_matrix(J, "J")
    G = J @ J.T
    return 0.5 * (G + G.T)


class SymEig(NamedTuple):
    values: np.ndarray  # descending
    vectors: np.ndarray  # columns are eigenvectors
    sweeps: int


def _round_robin(n):
    """Pair schedule covering every (p, q) once in n-1 rounds (n padded to even)."""
    m = n + (n % 2)
    order = list(range(m))
    rounds = []
    for _ in range(m - 1):
        a = np.array(order[: m // 2])
        b = np.array(order[m // 2 :][::-1])
        keep = (a < n) & (b < n)
        a, b = a[keep], b[keep]
        rounds.append((np.minimum(a, b), np.maximum(a, b)))
        order = [order[0], order[-1]] + order[1:-1]
    return rounds


def _off_norm(A):
    off = A.copy()
    np.fill_diagonal(off, 0.0)
    return np.linalg.norm(off)


def sym_eig(A, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Stops once the off-diagonal Frobenius norm is at most tol * ||A||_F.
    Eigenvalues are returned in descending order with matching columns of
    `vectors`; each eigenvector is signed so its largest entry is positive.
    """
    A = as_matrix(A, "A")
    n = A.shape[0]
    if A.shape[1] != n:
        raise ShapeError(f"sym_eig needs a square matrix, got {A.shape}")
    scale = np.linalg.norm(A)
    if n and np.max(np.abs(A - A.T)) > 1e-10 * max(scale, 1.0):
        raise ShapeError("sym_eig needs a symmetric matrix")
    A = 0.5 * (A + A.T)
    V = np.eye(n)
    if n <= 1 or scale == 0.0:
        return SymEig(np.diag(A).copy(), V, 0)

    rounds = _round_robin(n)
    thresh = tol * scale
    sweeps = 0
    while _off_norm(A) > thresh:
        if sweeps >= max_sweeps:
            raise NumericError(f"Jacobi did not converge in {max_sweeps} sweeps")
        sweeps += 1
        for p, q in rounds:
            apq = A[p, q]
            active = np.abs(apq) > 1e-300
            if not np.any(active):
                continue
            p, q, apq = p[active], q[active], apq[active]
            theta = (A[q, q] - A[p, p]) / (2.0 * apq)
            t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.hypot(theta, 1.0))
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            # A <- P^T A P with P[p,p]=P[q,q]=c, P[p,q]=s, P[q,p]=-s
            rp, rq = A[p, :].copy(), A[q, :].copy()
            A[p, :] = c[:, None] * rp - s[:, None] * rq
            A[q, :] = s[:, None] * rp + c[:, None] * rq
            cp, cq = A[:, p].copy(), A[:, q].copy()
            A[:, p] = cp * c - cq * s
            A[:, q] = cp * s + cq * c
            A[p, q] = 0.0
            A[q, p] = 0.0
            vp, vq = V[:, p].copy(), V[:, q].copy()
            V[:, p] = vp * c - vq * s
            V[:, q] = vp * s + vq * c

    vals = np.diag(A).copy()
    order = np.argsort(-vals, kind="stable")
    vals, V = vals[order], V[:, order]
    lead = np.argmax(np.abs(V), axis=0)
    V = V * np.where(V[lead, np.arange(n)] < 0, -1.0, 1.0)
    return SymEig(vals, V, sweeps)


def sym_expm_action(eig: SymEig, t, v):
    """exp(-A t) v for A = V diag(values) V^T; v may be a vector or a matrix."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim not in (1, 2) or v.shape[0] != len(eig.values):
        raise ShapeError(f"vector of length {v.shape[:1]} does not match dimension {len(eig.values)}")
    if t == 0:
        return v.copy()
    V = eig.vectors
    coef = np.exp(-eig.values * t)
    if v.ndim == 1:
        return V @ (coef * (V.T @ v))
    return V @ (coef[:, None] * (V.T @ v))


# --- random streams -------------------------------------------------------

_MASK = (1 << 64) - 1


def _label_hash(label):
    h = hashlib.blake2b(str(label).encode(), digest_size=8).digest()
    return int.from_bytes(h, "little")


@dataclass(frozen=True)
class Rng:
    """Counter-based random stream keyed by (seed, stream).

    Two Rng values with equal keys always yield the same draws. Substreams
    are derived by label, so adding a consumer never shifts another's draws.
    """

    seed: int
    stream: int = 0

    def generator(self):
        key = np.array([self.seed & _MASK, self.stream & _MASK], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, label):
        return Rng(self.seed, _label_hash(f"{self.stream}/{label}"))


def _gen(rng):
    if isinstance(rng, Rng):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected Rng or numpy Generator, got {type(rng).__name__}")


def rng_gaussian(rng, shape, std=1.0):
    return _gen(rng).standard_normal(shape) * std


def rng_uniform(rng, shape, low=0.0, high=1.0):
    return _gen(rng).uniform(low, high, shape)


def rng_rademacher(rng, shape):
    return np.where(_gen(rng).random(shape) < 0.5, -1.0, 1.0)


def rng_permutation(rng, n):
    return _gen(rng).permutation(n)


rng_perm = rng_permutation


def rng_sphere(rng, d):
    """Uniform point on the unit sphere in R^d."""
    if d < 1:
        raise ShapeError("sphere samples need dimension >= 1")
    v = _gen(rng).standard_normal(d)
    return v / np.linalg.norm(v)


def rng_choice(rng, n, m):
    """m distinct indices out of range(n), in sorted order."""
    if m > n:
        raise ShapeError(f"cannot choose {m} of {n} without replacement")
    return np.sort(_gen(rng).choice(n, size=m, replace=False))
