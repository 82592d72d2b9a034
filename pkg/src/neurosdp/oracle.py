"""Reference solver for the primal feasibility problem and certificate verdicts.

The solver maximizes ``t(z) = lambda_min(Gamma(b, z))`` over the free
moments.  ``t* >= 0`` means the behavior admits a PSD completion at the
given level; ``t* < 0`` means it does not.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import bell, moments
from .linalg import eig_min

log = logging.getLogger(__name__)

CERT_TOL = 1e-9
TRUTH_TOL = 1e-6
BOX = 10.0

FEASIBLE, INFEASIBLE, INCONCLUSIVE = "Feasible", "Infeasible", "Inconclusive"


@dataclass
class OracleResult:
    t_star: float
    z_star: np.ndarray
    iterations: int
    converged: bool
    method: str = "barrier"

    @property
    def truth(self) -> int:
        """+1 feasible, -1 infeasible, 0 too close to the boundary to call."""
        return ground_truth(self.t_star)


def ground_truth(t_star, tol: float = TRUTH_TOL):
    t = np.asarray(t_star, dtype=float)
    out = np.where(t > tol, 1, np.where(t < -tol, -1, 0))
    return int(out) if out.ndim == 0 else out


def _subgradient(layout, probs, iters, step0):
    _, G = moments._basis(layout)
    z = np.zeros(layout.free_count)
    best_t, best_z = -np.inf, z.copy()
    for it in range(1, iters + 1):
        res = eig_min(moments.assemble_primal(layout, probs, z))
        if res.value > best_t:
            best_t, best_z = res.value, z.copy()
        g = np.einsum("kij,i,j->k", G, res.vector, res.vector)
        z = z + step0 / np.sqrt(it) * g
    return best_t, best_z, iters, False


def _barrier(layout, probs, iters, tol, box):
    """Log-barrier path following on max t s.t. Gamma(z) - t I >= 0, |z_j| <= box."""
    _, G = moments._basis(layout)
    nf, m = layout.free_count, layout.m
    K = np.concatenate([G, -np.eye(m)[None]], axis=0)  # d/d(z, t) of Gamma(z) - tI
    A = moments.assemble_primal(layout, probs, np.zeros(nf))
    x = np.zeros(nf + 1)
    x[-1] = eig_min(A).value - 1.0
    best_t, best_z = eig_min(A).value, np.zeros(nf)
    n_barrier = m + 2 * nf

    def phi(x, s):
        X = A + np.tensordot(x, K, axes=1)
        try:
            L = np.linalg.cholesky(X)
        except np.linalg.LinAlgError:
            return np.inf
        z = x[:-1]
        if np.any(np.abs(z) >= box):
            return np.inf
        return (-s * x[-1] - 2.0 * np.log(np.diag(L)).sum()
                - np.log(box - z).sum() - np.log(box + z).sum())

    s, steps, converged = 1.0, 0, False
    while steps < iters:
        # centering; stalls near the end of the path are tolerated
        for _ in range(50):
            if steps >= iters:
                break
            z = x[:-1]
            X = A + np.tensordot(x, K, axes=1)
            Xi = np.linalg.inv(X)
            B = np.einsum("ij,ajk->aik", Xi, K)
            grad = -np.einsum("aii->a", B)
            grad[-1] -= s
            grad[:-1] += 1.0 / (box - z) - 1.0 / (box + z)
            H = np.einsum("aij,bji->ab", B, B)
            H[np.arange(nf), np.arange(nf)] += 1.0 / (box - z) ** 2 + 1.0 / (box + z) ** 2
            try:
                dx = -np.linalg.solve(H, grad)
            except np.linalg.LinAlgError:
                dx = -np.linalg.lstsq(H, grad, rcond=None)[0]
            dec = -grad @ dx
            steps += 1
            if dec / 2.0 <= 1e-9:
                break
            f0 = phi(x, s)
            alpha = 1.0
            while alpha > 1e-14 and phi(x + alpha * dx, s) > f0 - 0.25 * alpha * dec:
                alpha *= 0.5
            if alpha <= 1e-14:
                break
            x = x + alpha * dx
            t_now = eig_min(A + np.tensordot(x[:-1], G, axes=1)).value
            if t_now > best_t:
                best_t, best_z = t_now, x[:-1].copy()
        if n_barrier / s < tol:
            converged = True
            break
        s *= 10.0
    return best_t, best_z, steps, converged


def max_min_eig(layout: moments.MomentLayout, b, iters: Optional[int] = None,
                step0: float = 1.0, method: str = "barrier", tol: float = 1e-9,
                box: float = BOX) -> OracleResult:
    """Largest achievable smallest eigenvalue of the moment matrix of ``b``.

    ``method="barrier"`` runs a log-barrier interior-point method (``iters``
    caps Newton steps, default 500); ``method="subgradient"`` runs
    ``z <- z + step0/sqrt(t) * g`` from ``z = 0`` (default 20000 steps).
    Both return the best iterate seen, re-evaluated exactly.
    """
    probs = bell._as_probs(b)
    if method == "barrier":
        iters = 500 if iters is None else iters
        if iters < 1:
            raise ValueError("iters must be >= 1")
        t, z, n, ok = _barrier(layout, probs, iters, tol, box)
    elif method == "subgradient":
        iters = 20000 if iters is None else iters
        if iters < 1:
            raise ValueError("iters must be >= 1")
        t, z, n, ok = _subgradient(layout, probs, iters, step0)
    else:
        raise ValueError(f"unknown oracle method {method!r}")
    t = eig_min(moments.assemble_primal(layout, probs, z)).value
    return OracleResult(t, z, n, ok, method)


def _solve_row(args):
    level, row, kwargs = args
    return max_min_eig(moments.build_layout(level), row, **kwargs)


def solve_many(level: str, probs, workers: int = 1, **kwargs) -> list[OracleResult]:
    """Run :func:`max_min_eig` on every row, optionally over a process pool (order preserved)."""
    probs = np.atleast_2d(probs)
    jobs = [(level, row, kwargs) for row in probs]
    if workers <= 1 or len(jobs) < 2:
        return [_solve_row(j) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_solve_row, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


# --- verdicts ----------------------------------------------------------------

class IntegrityError(RuntimeError):
    """Both the primal and the dual network certified the same behavior."""


@dataclass
class Verdict:
    tag: str
    certificate: Optional[np.ndarray]
    lambda_min: float
    lambda_primal: float = np.nan
    lambda_dual: float = np.nan
    relabeling: Optional[bell.Relabeling] = field(default=None, repr=False)


def verdict(primal_model, dual_model, b) -> Verdict:
    """Feasible / Infeasible / Inconclusive from a primal and a dual network.

    Either model may be ``None``.  The certificate refers to the canonical
    relabeling of ``b``, which is stored on the verdict.
    """
    from .neural import predict

    if primal_model is not None and dual_model is not None and primal_model.level != dual_model.level:
        raise ValueError("primal and dual models are for different levels")
    probs = bell._as_probs(b)
    canon, relab = bell.canonicalize(probs)
    lp = ld = np.nan
    zp = yd = None
    if primal_model is not None:
        zp, lp = predict(primal_model, probs)
    if dual_model is not None:
        yd, ld = predict(dual_model, probs)
    ok_p = lp >= -CERT_TOL
    ok_d = ld >= -CERT_TOL
    if ok_p and ok_d:
        raise IntegrityError(f"double certification (primal {lp:.3e}, dual {ld:.3e})")
    if ok_p:
        return Verdict(FEASIBLE, zp, float(lp), lp, ld, relab)
    if ok_d:
        return Verdict(INFEASIBLE, yd, float(ld), lp, ld, relab)
    finite = [v for v in (lp, ld) if not np.isnan(v)]
    return Verdict(INCONCLUSIVE, None, float(max(finite)) if finite else np.nan, lp, ld, relab)


def verdict_batch(primal_model, dual_model, probs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized :func:`verdict` over rows: (tags, lambda_primal, lambda_dual).

    Missing models give NaN columns.  Raises :class:`IntegrityError` if any
    row is certified both ways.
    """
    from .neural import predict

    if primal_model is not None and dual_model is not None and primal_model.level != dual_model.level:
        raise ValueError("primal and dual models are for different levels")
    probs = np.atleast_2d(bell._as_probs(probs))
    n = probs.shape[0]
    lp = predict(primal_model, probs)[1] if primal_model is not None else np.full(n, np.nan)
    ld = predict(dual_model, probs)[1] if dual_model is not None else np.full(n, np.nan)
    ok_p, ok_d = lp >= -CERT_TOL, ld >= -CERT_TOL
    if np.any(ok_p & ok_d):
        rows = np.flatnonzero(ok_p & ok_d)
        raise IntegrityError(f"double certification at rows {rows[:10].tolist()}")
    tags = np.where(ok_p, FEASIBLE, np.where(ok_d, INFEASIBLE, INCONCLUSIVE)).astype(object)
    return tags, lp, ld


def accuracy(model, test_behaviors, oracle_results) -> float:
    """Fraction of decided samples on which the model's certificate agrees with the oracle.

    A primal model agrees when it certifies exactly the feasible samples, a
    dual model when it certifies exactly the infeasible ones.  Samples whose
    oracle value is within the truth tolerance of zero are skipped.
    """
    from .neural import predict

    t = np.array([r.t_star if isinstance(r, OracleResult) else r for r in oracle_results])
    truth = ground_truth(t)
    keep = truth != 0
    if not keep.any():
        return float("nan")
    _, lam = predict(model, np.atleast_2d(test_behaviors)[keep])
    certified = lam >= -CERT_TOL
    target = truth[keep] == (1 if model.mode == "primal" else -1)
    return float(np.mean(certified == target))
