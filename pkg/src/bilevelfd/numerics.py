"""Dense float64 primitives: seeded randomness and a small symmetric eigensolver.

The eigensolver is a cyclic Jacobi sweep intended for the modest matrices of
the verification layer (default cap 512), not a general LAPACK replacement.
Randomness comes from numpy's PCG64 generator so that a seed pins the whole
stream of uniform and normal draws; normals use numpy's ziggurat transform.
"""

from __future__ import annotations

import math

import numpy as np

DEFAULT_EIGEN_CAP = 512


class EigenError(RuntimeError):
    """Cyclic Jacobi failed to reach the target off-diagonal residual."""


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator for a 64-bit seed (PCG64 stream)."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def normal_sample(rng: np.random.Generator, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """Draw ``n`` normals with the given mean and (nonnegative) std."""
    if std < 0:
        raise ValueError(f"std must be nonnegative, got {std}")
    return mean + std * rng.standard_normal(int(n))


def random_orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    """Haar-ish random orthogonal matrix via QR with sign-fixed diagonal."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    """Raise if ``arr`` contains NaN/Inf; returns the array unchanged."""
    a = np.asarray(arr)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def symmetrize(m: np.ndarray) -> np.ndarray:
    """Exactly symmetric copy of ``m``: (m + m.T) / 2."""
    a = np.asarray(m, dtype=float)
    return (a + a.T) / 2.0


def sym_eigen(
    m: np.ndarray,
    *,
    size_cap: int = DEFAULT_EIGEN_CAP,
    max_sweeps: int = 60,
) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of an exactly symmetric matrix by cyclic Jacobi.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues ascending and
    eigenvectors in the matching columns, so ``V @ diag(w) @ V.T`` rebuilds
    the input to ~1e-10 * (1 + ||m||_F).

    Raises ``ValueError`` for non-square, non-symmetric, non-finite or
    oversized input and ``EigenError`` if ``max_sweeps`` sweeps do not reach
    the residual target (the message reports the remaining residual).
    """
    a = np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    if n < 1:
        raise ValueError("matrix must be at least 1x1")
    if n > size_cap:
        raise ValueError(f"matrix size {n} exceeds the eigensolver cap {size_cap}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite entries")
    if not np.array_equal(a, a.T):
        raise ValueError("matrix must be exactly symmetric (see symmetrize())")

    a = a.copy()
    v = np.eye(n)
    scale = float(np.linalg.norm(a, "fro"))
    if n == 1 or scale == 0.0:
        w = np.diag(a).copy()
        order = np.argsort(w, kind="stable")
        return w[order], v[:, order]

    tol = 1e-14 * scale
    skip = 1e-20 * scale
    off = math.inf
    for _ in range(max_sweeps):
        off = math.sqrt(2.0 * float(np.sum(np.tril(a, -1) ** 2)))
        if off <= tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= skip:
                    continue
                app, aqq = a[p, p], a[q, q]
                theta = (aqq - app) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.hypot(theta, 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c

                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                new_p = c * row_p - s * row_q
                new_q = s * row_p + c * row_q
                a[p, :] = new_p
                a[q, :] = new_q
                a[:, p] = new_p
                a[:, q] = new_q
                a[p, p] = c * c * app - 2.0 * s * c * apq + s * s * aqq
                a[q, q] = s * s * app + 2.0 * s * c * apq + c * c * aqq
                a[p, q] = a[q, p] = 0.0

                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
    else:
        raise EigenError(
            f"Jacobi sweep did not converge after {max_sweeps} sweeps; "
            f"off-diagonal residual {off:.3e} (target {tol:.3e})"
        )

    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]
