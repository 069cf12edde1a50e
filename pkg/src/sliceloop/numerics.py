"""Small dense linear-algebra and statistics kernel.

Matrices are plain 2-D ``numpy`` float arrays; only the symmetric
eigenproblem is solved here (cyclic Jacobi), everything else is thin glue.
"""

from __future__ import annotations

import hashlib
from typing import Iterable

import numpy as np

from .errors import (
    IndefiniteInput,
    NegativeSigma,
    NoConvergence,
    NotSquare,
    NotSymmetric,
    TooFewSamples,
)

MAX_SWEEPS = 100
CLAMP_TOL = 1e-9


def _as_square(m) -> np.ndarray:
    a = np.array(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NotSquare(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def sym_eig(m, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(w, V)`` with eigenvalues ``w`` sorted in descending order and
    the matching unit eigenvectors as the columns of ``V``.
    """
    a = _as_square(m)
    n = a.shape[0]
    scale = max(np.abs(a).max(), 1.0)
    if np.abs(a - a.T).max() > tol * scale:
        raise NotSymmetric(f"asymmetry {np.abs(a - a.T).max():.3g} exceeds tol {tol:g}")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    if n == 1:
        return a.diagonal().copy(), v

    # work at unit magnitude so squared entries neither underflow nor overflow
    mag = np.abs(a).max()
    if mag == 0.0:
        return a.diagonal().copy(), v
    a = a / mag
    frob = np.linalg.norm(a)
    offdiag = ~np.eye(n, dtype=bool)
    for _ in range(MAX_SWEEPS):
        off = np.sqrt(np.sum(a[offdiag] ** 2))
        if off <= 1e-15 * frob or off == 0.0:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e150:
                    t = 0.5 / theta  # theta^2 would overflow
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise NoConvergence(f"Jacobi did not converge in {MAX_SWEEPS} sweeps")

    w = a.diagonal() * mag
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def sqrtm_psd(m) -> np.ndarray:
    """Principal square root of a symmetric positive semi-definite matrix."""
    a = _as_square(m)
    scale = max(np.abs(a).max(), 1.0)
    w, v = sym_eig(a, tol=1e-8 * scale)
    if w.min(initial=0.0) < -CLAMP_TOL * scale:
        raise IndefiniteInput(f"eigenvalue {w.min():.3g} is below -{CLAMP_TOL:g}")
    root = np.sqrt(np.clip(w, 0.0, None))
    r = (v * root) @ v.T
    return 0.5 * (r + r.T)


def mean_cov(data) -> tuple[np.ndarray, np.ndarray]:
    """Column means and unbiased (n - 1) covariance of row samples."""
    x = np.asarray(data, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 2:
        raise TooFewSamples(f"need at least 2 samples, got {n}")
    mu = x.mean(axis=0)
    centered = x - mu
    sigma = centered.T @ centered / (n - 1)
    return mu, 0.5 * (sigma + sigma.T)


def _key_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("stream keys must be non-negative")
        return int(key) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class RngStream:
    """Seeded, splittable random stream.

    A stream is identified by ``(seed, key path)``. Children derived with
    :meth:`child` depend only on their own path, never on how many draws the
    parent has made, so substreams are reproducible in any execution order.
    """

    def __init__(self, seed: int, stream_id=0, *, _path: tuple[int, ...] | None = None):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = _path if _path is not None else (_key_int(stream_id),)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self.gen = np.random.Generator(np.random.Philox(seq))

    @property
    def stream_id(self) -> int:
        return self.path[-1]

    def child(self, *keys) -> "RngStream":
        return RngStream(self.seed, _path=self.path + tuple(_key_int(k) for k in keys))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path})"


def gaussian_draw(rng: RngStream, mu: float, sigma: float, n: int) -> np.ndarray:
    if sigma < 0:
        raise NegativeSigma(f"sigma must be >= 0, got {sigma}")
    z = rng.gen.standard_normal(n)
    if sigma == 0:
        return np.full(n, float(mu))
    return mu + sigma * z


def as_matrix(rows: Iterable[Iterable[float]]) -> np.ndarray:
    return np.atleast_2d(np.asarray(list(rows), dtype=float))
