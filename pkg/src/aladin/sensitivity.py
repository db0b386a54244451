"""Per-block sensitivities for the coordination step.

Covers active-set detection over the combined inequality vector
``h~ = (h, lb - x, x - ub)``, active-constraint Jacobians, eigenvalue-flip
regularization, (damped) BFGS updates, nullspace bases, and the reduced /
Schur-complement quantities for the low-dimensional coordination paths.
All operations are pure per-block computations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import expr as ex
from .errors import LicqError

__all__ = [
    "ActiveSet",
    "SensitivityPack",
    "ReducedBlock",
    "detect_active",
    "active_jacobian",
    "regularize",
    "bfgs_update",
    "nullspace_basis",
    "reduce_block",
    "schur_contribution",
    "lagrangian_like_gradient",
]


@dataclass(frozen=True)
class ActiveSet:
    """Indices into h~ = (h, lb - x, x - ub) whose value exceeds -margin."""

    indices: tuple[int, ...]
    n_h: int
    n_x: int

    @property
    def nonbox(self):
        """Active indices that belong to h itself (curvature carriers)."""
        return tuple(j for j in self.indices if j < self.n_h)


@dataclass
class ReducedBlock:
    """Projected quantities for one block: B_red = Z'BZ, g_red = Z'g, A_red = AZ."""

    B: np.ndarray
    g: np.ndarray
    A: np.ndarray


@dataclass
class SensitivityPack:
    """Everything one block contributes to the coordination QP.

    ``hess_raw`` is the (possibly indefinite) Lagrangian Hessian or BFGS
    matrix before processing; ``hess`` is the positive definite matrix the
    full-space QP uses.  The reduced triple and Schur pair are filled only by
    the nullspace / bilevel paths.
    """

    grad: np.ndarray
    hess_raw: np.ndarray
    hess: np.ndarray
    active: ActiveSet
    jac_active: np.ndarray
    Z: np.ndarray | None = None
    reduced: ReducedBlock | None = None
    schur: tuple[np.ndarray, np.ndarray] | None = None


def combined_inequalities(sub, x, p=None):
    """Values of h~ = (h, lb - x, x - ub); infinite bounds give -inf rows."""
    p = sub.p0 if p is None else p
    hv = ex.evaluate(sub.h, x, p)
    return np.concatenate([hv, sub.lb - x, x - sub.ub])


def detect_active(sub, x, p, tau):
    """Active set at x: every j with h~_j(x) > -tau."""
    if tau <= 0:
        raise ValueError("active-set margin must be positive")
    vals = combined_inequalities(sub, x, p)
    idx = tuple(int(j) for j in np.flatnonzero(vals > -tau))
    return ActiveSet(idx, sub.n_h, sub.n_x)


def active_jacobian(sub, x, p, act):
    """Rows: grad g_i stacked over grad h~_j for j active, in index order.

    Box rows are unit vectors: -e_k for an active lower bound on x_k,
    +e_k for an active upper bound.
    """
    p = sub.p0 if p is None else p
    n = sub.n_x
    rows = [ex.jacobian(sub.g, x, p)]
    if act.indices:
        Jh = ex.jacobian(sub.h, x, p)
        for j in act.indices:
            if j < act.n_h:
                rows.append(Jh[j: j + 1])
            elif j < act.n_h + n:
                e = np.zeros((1, n))
                e[0, j - act.n_h] = -1.0
                rows.append(e)
            else:
                e = np.zeros((1, n))
                e[0, j - act.n_h - n] = 1.0
                rows.append(e)
    return np.vstack(rows) if rows else np.zeros((0, n))


def regularize(H, delta):
    """Flip negative eigenvalues, floor small ones at delta.

    Eigenvalue rule: |w| if w < -delta, delta if |w| < delta, else w.
    The result is symmetric with minimum eigenvalue >= delta.
    """
    if delta <= 0:
        raise ValueError("regularization floor must be positive")
    H = np.asarray(H, dtype=float)
    if H.size == 0:
        return H.copy()
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    w_mod = np.where(w < -delta, np.abs(w), np.where(np.abs(w) < delta, delta, w))
    out = (V * w_mod) @ V.T
    return 0.5 * (out + out.T)


def bfgs_update(B, s, y, damped=False):
    """BFGS curvature update of an SPD matrix.

    Plain mode skips the update when s'y <= 1e-12 ||s|| ||y|| (result may
    otherwise lose definiteness); damped mode applies Powell's correction
    with threshold 0.2 and mixing weight theta = 0.8 s'Bs / (s'Bs - s'y),
    which keeps the result SPD unconditionally.
    """
    B = np.asarray(B, dtype=float)
    s = np.asarray(s, dtype=float)
    y = np.asarray(y, dtype=float)
    if s.size != y.size:
        raise ValueError("step and gradient difference must have equal length")
    sn = np.linalg.norm(s)
    if sn == 0.0:
        return B.copy()
    Bs = B @ s
    sBs = float(s @ Bs)
    sy = float(s @ y)
    if damped:
        if sy < 0.2 * sBs:
            theta = 0.8 * sBs / (sBs - sy)
            y = theta * y + (1.0 - theta) * Bs
            sy = float(s @ y)
    elif sy <= 1e-12 * sn * np.linalg.norm(y):
        return B.copy()
    out = B - np.outer(Bs, Bs) / sBs + np.outer(y, y) / sy
    return 0.5 * (out + out.T)


def nullspace_basis(C):
    """Orthonormal basis of null(C) via SVD; identity for a 0-row C.

    Raises LicqError when C is rank deficient (the active constraint
    gradients are linearly dependent).
    """
    C = np.asarray(C, dtype=float)
    m, n = C.shape
    if m == 0:
        return np.eye(n)
    U, sv, Vt = np.linalg.svd(C)
    tol = max(m, n) * np.finfo(float).eps * (sv[0] if sv.size else 0.0)
    rank = int(np.sum(sv > tol))
    if rank < m:
        raise LicqError(
            f"active constraint Jacobian is rank deficient (rank {rank} of {m} rows)"
        )
    return Vt[m:].T


def reduce_block(hess_raw, grad, A, Z, delta, reg=True):
    """Project onto the active-constraint nullspace and re-regularize.

    Returns (Z' H Z regularized, Z' g, A Z); with Z = I this is exactly the
    full-space processed triple.  Regularization of the projected Hessian can
    be switched off together with the full-space regularization option.
    """
    B = Z.T @ hess_raw @ Z
    if reg:
        B = regularize(B, delta)
    return ReducedBlock(B=B, g=Z.T @ grad, A=np.asarray(A, dtype=float) @ Z)


def lagrangian_like_gradient(sub, x, p, kappa, gamma):
    """Gradient of f + kappa.g + gamma.h at x (curvature probe for BFGS).

    Box terms drop out of curvature differences (their gradient is constant)
    and are omitted.
    """
    r = ex.gradient(sub.f, x, p)
    if sub.n_g:
        r = r + ex.jacobian(sub.g, x, p).T @ kappa
    if sub.n_h:
        r = r + ex.jacobian(sub.h, x, p).T @ gamma
    return r


def schur_contribution(red, v=None, coupling=None):
    """One block's dual-system contribution: S = A B^-1 A', s = Av - A B^-1 g.

    ``v`` is the block's current value in reduced coordinates; callers that
    track the coupling contribution A_i x_i directly (the outer loop does,
    since the local iterate need not lie in the span of Z) pass it via
    ``coupling`` instead.  Zero rows of the reduced coupling matrix yield
    exactly zero rows and columns of S.
    """
    A = red.A
    n_c = A.shape[0]
    if (v is None) == (coupling is None):
        raise ValueError("pass exactly one of v or coupling")
    base = A @ np.asarray(v, dtype=float) if v is not None else np.asarray(coupling, dtype=float)
    if base.shape != (n_c,):
        raise ValueError(f"coupling value must have length {n_c}")
    if red.B.size:
        BinvA = np.linalg.solve(red.B, A.T)
        Binvg = np.linalg.solve(red.B, red.g)
    else:
        BinvA = np.zeros((0, n_c))
        Binvg = np.zeros(0)
    S = A @ BinvA
    S = 0.5 * (S + S.T)
    s_vec = base - A @ Binvg
    # enforce the structural sparsity exactly: rows of A that are zero give
    # zero rows/columns regardless of roundoff
    zero_rows = ~np.any(A != 0.0, axis=1)
    S[zero_rows, :] = 0.0
    S[:, zero_rows] = 0.0
    return S, s_vec
