"""Local solver: primal-dual interior point for the per-block proximal NLP.

Each outer iteration solves, independently per block,

    min_x  f(x, p) + lam' A x + (x - z)' Sigma (x - z)
    s.t.   g(x, p) = 0,   h(x, p) <= 0,   lb <= x <= ub.

Slack variables handle h; the box rows are kept in the barrier directly.
Newton steps act on the condensed symmetric KKT system with inertia
correction, a 0.995 fraction-to-boundary rule, and monotone barrier reduction
by a factor of 0.2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import expr as ex
from .errors import SingularKktError
from .linalg import LdlFactor

__all__ = ["LocalSolution", "solve_local"]

FTB = 0.995           # fraction-to-boundary
BARRIER_FACTOR = 0.2  # monotone mu reduction
MAX_NEWTON = 100


@dataclass
class LocalSolution:
    """KKT point of the proximal block NLP.

    ``eta`` stacks the box multipliers, lower bounds first (length 2 n_x,
    zeros for infinite bounds).  ``status`` is "converged", "max-iter", or
    "stalled".
    """

    x: np.ndarray
    kappa: np.ndarray
    gamma: np.ndarray
    eta: np.ndarray
    status: str
    iterations: int
    kkt_residual: float


class _Work:
    """Evaluation bundle for one block at fixed (z, lam, Sigma, p)."""

    def __init__(self, sub, z, lam, Sigma, p):
        self.sub = sub
        self.z = z
        self.lam = lam
        self.Sigma = Sigma
        self.p = p
        self.Alam = sub.A.T @ lam if lam.size else np.zeros(sub.n_x)
        self.mL = np.isfinite(sub.lb)
        self.mU = np.isfinite(sub.ub)

    def eval_point(self, x):
        sub, p = self.sub, self.p
        return {
            "g": ex.evaluate(sub.g, x, p),
            "h": ex.evaluate(sub.h, x, p),
            "grad_f": ex.gradient(sub.f, x, p),
            "Jg": ex.jacobian(sub.g, x, p),
            "Jh": ex.jacobian(sub.h, x, p),
        }

    def obj_grad(self, x, ev):
        return ev["grad_f"] + self.Alam + 2.0 * (self.Sigma @ (x - self.z))

    def hess(self, x, kappa, gamma):
        H = ex.lagrangian_hessian(
            self.sub.f, self.sub.g, self.sub.h, x, self.p, kappa, gamma
        )
        return H + 2.0 * self.Sigma


def _residuals(w, x, s, kappa, gamma, etaL, etaU, mu, ev):
    """KKT residual blocks at barrier parameter mu; also their max norm."""
    sub = w.sub
    n = sub.n_x
    r_x = w.obj_grad(x, ev)
    if sub.n_g:
        r_x = r_x + ev["Jg"].T @ kappa
    if sub.n_h:
        r_x = r_x + ev["Jh"].T @ gamma
    r_x = r_x - etaL + etaU
    r_g = ev["g"]
    r_h = ev["h"] + s
    r_cs = s * gamma - mu
    r_L = np.zeros(n)
    r_U = np.zeros(n)
    mL, mU = w.mL, w.mU
    r_L[mL] = (x[mL] - sub.lb[mL]) * etaL[mL] - mu
    r_U[mU] = (sub.ub[mU] - x[mU]) * etaU[mU] - mu
    parts = [r_x, r_g, r_cs, r_L, r_U, r_h]
    err = max((np.abs(v).max() for v in parts if v.size), default=0.0)
    return err, (r_x, r_g, r_h, r_cs, r_L, r_U)


def _max_step(v, dv, mask=None):
    """Largest alpha <= 1 with v + alpha dv >= (1 - FTB) v on masked entries."""
    if v.size == 0:
        return 1.0
    neg = dv < 0
    if mask is not None:
        neg = neg & mask
    if not np.any(neg):
        return 1.0
    return min(1.0, float(np.min(-FTB * v[neg] / dv[neg])))


def _solve_newton(W, Jg, rhs_x, rhs_g):
    """Condensed KKT solve with primal (and, late, dual) inertia correction."""
    n, m = W.shape[0], Jg.shape[0]
    scale = 1.0 + np.abs(W).max(initial=0.0)
    zeta = 0.0
    zeta_d = 0.0
    for attempt in range(12):
        K = np.zeros((n + m, n + m))
        K[:n, :n] = W + zeta * np.eye(n)
        if m:
            K[:n, n:] = Jg.T
            K[n:, :n] = Jg
            if zeta_d:
                K[n:, n:] = -zeta_d * np.eye(m)
        try:
            fac = LdlFactor(K)
            npos, nneg, nzero = fac.inertia()
            if npos == n and nneg == m and nzero == 0:
                sol = fac.solve(np.concatenate([rhs_x, rhs_g]))
                if np.all(np.isfinite(sol)):
                    return sol[:n], sol[n:]
        except SingularKktError:
            pass
        zeta = zeta * 100.0 if zeta else 1e-8 * scale
        if attempt >= 6:
            zeta_d = zeta_d * 100.0 if zeta_d else 1e-10
    raise SingularKktError("local KKT system could not be corrected to solvable form")


def solve_local(sub, z, lam, Sigma, p=None, warm=None, tol=1e-10):
    """Solve one block's proximal NLP to the given KKT tolerance.

    Parameters
    ----------
    sub : Subproblem
    z : array_like
        Proximal center (the coordination primal for this block).
    lam : array_like
        Consensus dual; enters through the linear term lam' A x.
    Sigma : array_like
        Symmetric positive (semi)definite proximal weight matrix.
    p : array_like or None
        Parameter vector; defaults to the block's stored values.
    warm : LocalSolution or None
        Previous solution; checked first and reused as the start point.
    tol : float
        Target for the maximum KKT residual (stationarity, feasibility,
        complementarity), measured in the infinity norm.

    Returns
    -------
    LocalSolution
        Primal point within bounds, multipliers kappa / gamma / eta, status.
    """
    z = np.asarray(z, dtype=float)
    lam = np.asarray(lam, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    p = sub.p0 if p is None else np.asarray(p, dtype=float)
    n, n_g, n_h = sub.n_x, sub.n_g, sub.n_h
    w = _Work(sub, z, lam, Sigma, p)
    mL, mU = w.mL, w.mU

    # shortcut: a warm start already at KKT quality is returned unchanged
    if warm is not None:
        ev = w.eval_point(warm.x)
        s_exact = np.maximum(-ev["h"], 0.0)
        err, _ = _residuals(
            w, warm.x, s_exact, warm.kappa, warm.gamma,
            warm.eta[:n], warm.eta[n:], 0.0, ev,
        )
        if err <= tol and np.all(warm.x >= sub.lb) and np.all(warm.x <= sub.ub):
            return LocalSolution(
                warm.x.copy(), warm.kappa.copy(), warm.gamma.copy(),
                warm.eta.copy(), "converged", 0, err,
            )

    # strictly interior start
    x = warm.x.copy() if warm is not None else z.copy()
    span = sub.ub - sub.lb
    margin = np.where(
        np.isfinite(span), np.minimum(1e-2 * (1.0 + np.abs(x)), 0.25 * span), 1e-2
    )
    x = np.where(mL, np.maximum(x, sub.lb + margin), x)
    x = np.where(mU, np.minimum(x, sub.ub - margin), x)

    ev = w.eval_point(x)
    etaL = np.zeros(n)
    etaU = np.zeros(n)
    if warm is not None:
        s = np.maximum(-ev["h"], 1e-8)
        gamma = np.maximum(warm.gamma, 1e-8)
        kappa = warm.kappa.copy()
        comp = float(np.mean(s * gamma)) if n_h else 1e-3
        mu = max(tol / 10.0, min(1e-3, comp))
        etaL[mL] = np.maximum(warm.eta[:n][mL], 1e-8)
        etaU[mU] = np.maximum(warm.eta[n:][mU], 1e-8)
    else:
        mu = 1e-1
        s = np.maximum(-ev["h"], 1e-2)
        gamma = mu / s
        kappa = np.zeros(n_g)
        etaL[mL] = mu / (x[mL] - sub.lb[mL])
        etaU[mU] = mu / (sub.ub[mU] - x[mU])

    mu_min = tol / 10.0
    status = "max-iter"
    err0 = np.inf
    best_pri = np.inf
    stall = 0
    it = 0
    for it in range(1, MAX_NEWTON + 1):
        err0, _ = _residuals(w, x, s, kappa, gamma, etaL, etaU, 0.0, ev)
        if err0 <= tol:
            status = "converged"
            break

        # infeasibility watch: true violation failing to decrease
        pri = max(
            np.abs(ev["g"]).max(initial=0.0),
            np.maximum(ev["h"], 0.0).max(initial=0.0),
        )
        if pri >= best_pri - 1e-16 and pri > tol:
            stall += 1
            if stall >= 10:
                status = "stalled"
                break
        else:
            stall = 0
        best_pri = min(best_pri, pri)

        err_mu, res = _residuals(w, x, s, kappa, gamma, etaL, etaU, mu, ev)
        if err_mu <= 10.0 * mu and mu > mu_min:
            mu = max(mu_min, BARRIER_FACTOR * mu)
            err_mu, res = _residuals(w, x, s, kappa, gamma, etaL, etaU, mu, ev)
        r_x, r_g, r_h, r_cs, r_L, r_U = res

        dL = x - sub.lb
        dU = sub.ub - x
        DL = np.zeros(n)
        DU = np.zeros(n)
        DL[mL] = etaL[mL] / dL[mL]
        DU[mU] = etaU[mU] / dU[mU]
        W = w.hess(x, kappa, gamma) + np.diag(DL + DU)
        rhs_x = -r_x
        rhs_x[mL] -= r_L[mL] / dL[mL]
        rhs_x[mU] += r_U[mU] / dU[mU]
        if n_h:
            Jh = ev["Jh"]
            W = W + Jh.T @ ((gamma / s)[:, None] * Jh)
            rhs_x = rhs_x - Jh.T @ ((gamma * r_h - r_cs) / s)
        dx, dkappa = _solve_newton(W, ev["Jg"], rhs_x, -r_g)

        if n_h:
            ds = -r_h - Jh @ dx
            dgamma = (-r_cs - gamma * ds) / s
        else:
            ds = np.zeros(0)
            dgamma = np.zeros(0)
        detaL = np.zeros(n)
        detaU = np.zeros(n)
        detaL[mL] = (-r_L[mL] - etaL[mL] * dx[mL]) / dL[mL]
        detaU[mU] = (-r_U[mU] + etaU[mU] * dx[mU]) / dU[mU]

        a_pri = min(
            _max_step(s, ds),
            _max_step(dL, dx, mL),
            _max_step(dU, -dx, mU),
        )
        a_dual = min(
            _max_step(gamma, dgamma),
            _max_step(etaL, detaL, mL),
            _max_step(etaU, detaU, mU),
        )

        # backtrack on the barrier KKT residual; the last trial is forced
        theta = 1.0
        moved = False
        for bt in range(9):
            xt = x + theta * a_pri * dx
            st = s + theta * a_pri * ds
            kt = kappa + theta * a_dual * dkappa
            gt = gamma + theta * a_dual * dgamma
            eLt = etaL + theta * a_dual * detaL
            eUt = etaU + theta * a_dual * detaU
            try:
                evt = w.eval_point(xt)
                errt, _ = _residuals(w, xt, st, kt, gt, eLt, eUt, mu, evt)
            except ex.DomainEvalError:
                theta *= 0.5
                continue
            if np.isfinite(errt) and (
                errt <= (1.0 - 1e-4 * theta * a_pri) * err_mu or bt == 8
            ):
                x, s, kappa, gamma, etaL, etaU, ev = xt, st, kt, gt, eLt, eUt, evt
                moved = True
                break
            theta *= 0.5
        if not moved:
            # every trial left the evaluation domain; give up on this center
            status = "stalled"
            break

    eta = np.concatenate([etaL, etaU])
    return LocalSolution(x, kappa, gamma, eta, status, it, err0)
