"""Smallest eigenpair of small dense symmetric matrices and its derivative."""
from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

DEGENERACY_GAP = 1e-9


class MinEig(NamedTuple):
    value: float
    vector: np.ndarray
    gap: float  # distance to the second smallest eigenvalue (inf for 1x1)

    @property
    def degenerate(self) -> bool:
        return self.gap < DEGENERACY_GAP


def _fix_sign(u: np.ndarray) -> np.ndarray:
    # largest-magnitude component positive (first one on ties)
    k = np.argmax(np.abs(u), axis=-1)
    s = np.sign(np.take_along_axis(u, k[..., None], axis=-1))
    s[s == 0] = 1.0
    return u * s


def jacobi_eigh(M, tol: float = 1e-12, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigendecomposition.

    Sweeps over all off-diagonal pairs until the off-diagonal Frobenius norm
    drops below ``tol * ||M||_F``.  Returns ascending eigenvalues and the
    matching eigenvectors as columns.
    """
    a = np.array(M, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("matrix must be square")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    v = np.eye(n)
    scale = np.linalg.norm(a)
    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0)) if theta != 0 else 1.0
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
                v[:, p] = c * vp - v[:, q] * s
                v[:, q] = s * vp + c * v[:, q]
    else:
        raise RuntimeError("Jacobi iteration did not converge")
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def eig_min(M, method: str = "lapack") -> MinEig:
    """Algebraically smallest eigenvalue with a unit eigenvector.

    The eigenvector's largest-magnitude component is made positive so the
    output is deterministic.  ``method`` selects LAPACK (``eigh``) or the
    in-house Jacobi routine.
    """
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    if method == "lapack":
        w, V = np.linalg.eigh(M)
    elif method == "jacobi":
        w, V = jacobi_eigh(M)
    else:
        raise ValueError(f"unknown eigensolver {method!r}")
    gap = float(w[1] - w[0]) if len(w) > 1 else np.inf
    return MinEig(float(w[0]), _fix_sign(V[:, 0]), gap)


def eig_min_batch(Ms) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched :func:`eig_min`: values (n,), vectors (n, m), gaps (n,)."""
    Ms = np.asarray(Ms, dtype=float)
    if not np.all(np.isfinite(Ms)):
        raise ValueError("matrix batch has non-finite entries")
    w, V = np.linalg.eigh(Ms)
    gap = w[:, 1] - w[:, 0] if w.shape[1] > 1 else np.full(w.shape[0], np.inf)
    return w[:, 0], _fix_sign(V[:, :, 0]), gap


def position_weights(m: int, groups: Sequence[Sequence[tuple[int, int]]]) -> np.ndarray:
    """Matrices ``D_p`` with dM/d(param p) = D_p for parameters tied to symmetric cells.

    Each group lists upper-triangle positions; an off-diagonal position
    contributes to both (i, j) and (j, i).
    """
    D = np.zeros((len(groups), m, m))
    for p, cells in enumerate(groups):
        for i, j in cells:
            D[p, i, j] = 1.0
            D[p, j, i] = 1.0
    return D


def grad_min_eig(M, groups) -> tuple[np.ndarray, bool]:
    """Gradient of the smallest eigenvalue with respect to tied entries.

    ``groups`` is either one list of upper-triangle ``(i, j)`` positions or a
    list of such lists, one per parameter.  The component for a group ``P``
    is ``sum_{(i,j) in P} (2 - [i == j]) u_i u_j``.  The flag is true when
    the eigengap is below :data:`DEGENERACY_GAP`, in which case the value is
    a supergradient of the concave function lambda_min.
    """
    M = np.asarray(M, dtype=float)
    single = len(groups) > 0 and isinstance(groups[0], tuple) and np.isscalar(groups[0][0])
    if single:
        groups = [groups]
    res = eig_min(M)
    u = res.vector
    g = np.array([sum((1.0 if i == j else 2.0) * u[i] * u[j] for i, j in cells)
                  for cells in groups])
    return (g[0] if single else g), res.degenerate
