"""Problem data model: subproblem blocks, coupling, options, lifting, JSON IO.

A :class:`SeparableProblem` is a list of blocks, each with its own objective
``f_i``, equality/inequality constraints ``g_i``/``h_i``, box bounds, and a
coupling matrix ``A_i``; the blocks interact only through the affine consensus
rows ``sum_i A_i x_i = b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import expr as ex
from .expr import VectorFunction

__all__ = [
    "Subproblem",
    "SeparableProblem",
    "SolverOptions",
    "LiftTerm",
    "LiftResult",
    "validate",
    "lift",
    "set_parameters",
    "load_problem_json",
    "problem_from_dict",
    "problem_to_dict",
]


def _as_vec(v, n, name, fill=0.0):
    if v is None:
        return np.full(n, fill, dtype=float)
    a = np.asarray(v, dtype=float).reshape(-1)
    if a.size != n:
        raise ValueError(f"{name} must have length {n}, got {a.size}")
    return a


def empty_function(n_x, n_p=0):
    """The 0-output function; stands in for absent g_i / h_i."""
    return VectorFunction([], n_x, n_p)


class Subproblem:
    """One block of the partially separable problem.

    Parameters
    ----------
    f : VectorFunction
        Scalar objective over (x_i, p_i).
    g, h : VectorFunction or None
        Equality and inequality constraint functions; None means 0 outputs.
    A : array_like
        Coupling matrix with one row per consensus constraint.
    lb, ub : array_like or None
        Box bounds; None means unbounded (+-inf allowed entrywise).
    p : array_like or None
        Default parameter values (length f.n_p).
    z0 : array_like or None
        Initial guess for the block's variables (defaults to zeros).
    """

    def __init__(self, f, g=None, h=None, A=None, lb=None, ub=None, p=None, z0=None):
        if f.n_out != 1:
            raise ValueError("objective must have exactly one output")
        self.f = f
        self.n_x = f.n_x
        self.n_p = f.n_p
        self.g = g if g is not None else empty_function(self.n_x, self.n_p)
        self.h = h if h is not None else empty_function(self.n_x, self.n_p)
        if A is None:
            A = np.zeros((0, self.n_x))
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.lb = _as_vec(lb, self.n_x, "lb", -np.inf)
        self.ub = _as_vec(ub, self.n_x, "ub", np.inf)
        self.p0 = _as_vec(p, self.n_p, "p")
        self.z0 = _as_vec(z0, self.n_x, "z0")

    @property
    def n_g(self):
        return self.g.n_out

    @property
    def n_h(self):
        return self.h.n_out

    def __repr__(self):
        return (
            f"Subproblem(n_x={self.n_x}, n_p={self.n_p}, n_g={self.n_g}, "
            f"n_h={self.n_h}, rows={self.A.shape[0]})"
        )


class SeparableProblem:
    """Blocks plus the consensus right-hand side b.

    ``parameters`` holds the active parameter vector per block; it is the only
    mutable state and is what :func:`set_parameters` updates, so repeated
    solves reuse every expression graph and cached derivative.
    """

    def __init__(self, subproblems, b=None, name=""):
        self.subproblems = list(subproblems)
        if not self.subproblems:
            raise ValueError("need at least one subproblem")
        n_c = self.subproblems[0].A.shape[0]
        self.b = _as_vec(b, n_c, "b")
        self.name = name
        self.parameters = [s.p0.copy() for s in self.subproblems]

    @property
    def n_s(self):
        return len(self.subproblems)

    @property
    def n_c(self):
        return self.b.size

    def __repr__(self):
        return f"SeparableProblem(n_s={self.n_s}, n_c={self.n_c}, name={self.name!r})"


def validate(problem):
    """Consistency check; returns the full list of violations (empty == ok)."""
    out = []
    subs = problem.subproblems
    n_c = problem.n_c
    for i, s in enumerate(subs):
        tag = f"subproblem {i}"
        if s.A.shape[0] != n_c:
            out.append(
                f"{tag}: coupling row mismatch (A has {s.A.shape[0]} rows, expected {n_c})"
            )
        if s.A.shape[1] != s.n_x:
            out.append(f"{tag}: A has {s.A.shape[1]} columns, expected {s.n_x}")
        if np.any(s.lb > s.ub):
            out.append(f"{tag}: bound ordering violated (lb > ub componentwise)")
        if s.z0.size != s.n_x:
            out.append(f"{tag}: initial guess has length {s.z0.size}, expected {s.n_x}")
        for fun, nm in ((s.f, "f"), (s.g, "g"), (s.h, "h")):
            if fun.n_x != s.n_x or fun.n_p != s.n_p:
                out.append(
                    f"{tag}: {nm} declared over ({fun.n_x}, {fun.n_p}) inputs, "
                    f"expected ({s.n_x}, {s.n_p})"
                )
        if problem.parameters[i].size != s.n_p:
            out.append(f"{tag}: active parameter vector has wrong length")
    if n_c:
        covered = np.zeros(n_c, dtype=bool)
        for s in subs:
            if s.A.shape[0] == n_c:
                covered |= np.any(s.A != 0.0, axis=1)
        for c in np.flatnonzero(~covered):
            out.append(f"consensus row {c} is referenced by no subproblem")
    return out


def set_parameters(problem, i, p):
    """Point block i at a new parameter vector; no graphs are rebuilt."""
    s = problem.subproblems[i]
    p = np.asarray(p, dtype=float).reshape(-1)
    if p.size != s.n_p:
        raise ValueError(f"parameter vector must have length {s.n_p}, got {p.size}")
    problem.parameters[i] = p.copy()
    return problem


# ---------------------------------------------------------------------------
# lifting: shared-variable terms -> consensus-coupled blocks
# ---------------------------------------------------------------------------

@dataclass
class LiftTerm:
    """One additive term of a problem over a shared global variable vector.

    ``touches`` lists the global indices the term reads; its functions are
    written over local variables in that order.
    """

    f: VectorFunction
    touches: list[int]
    g: VectorFunction | None = None
    h: VectorFunction | None = None
    p: np.ndarray | None = None


@dataclass
class LiftResult:
    problem: SeparableProblem
    # owner[j] = (term index, local index) of global variable j's primary copy
    owner: dict[int, tuple[int, int]] = field(default_factory=dict)

    def map_back(self, xs):
        """Recover the global variable vector from per-block solutions."""
        n = max(self.owner) + 1 if self.owner else 0
        out = np.zeros(n)
        for j, (ti, li) in self.owner.items():
            out[j] = xs[ti][li]
        return out


def lift(terms, lb=None, ub=None, x0=None):
    """Rewrite additive terms over shared variables as a separable problem.

    Each term becomes one subproblem over local copies of the globals it
    touches.  For every global variable shared by several terms, a consensus
    row per extra copy pins that copy to the first (owner) copy: +1 on the
    owner, -1 on the copy.  Bounds and initial values given over the global
    vector are replicated onto every copy.
    """
    terms = list(terms)
    if not terms:
        raise ValueError("need at least one term")
    for t in terms:
        if not t.touches:
            raise ValueError("every term must touch at least one variable")
        if t.f.n_x != len(t.touches):
            raise ValueError(
                f"term functions use {t.f.n_x} locals but touch {len(t.touches)}"
            )
    owner: dict[int, tuple[int, int]] = {}
    rows = []  # (global idx, owner (ti, li), copy (ti, li))
    for ti, t in enumerate(terms):
        for li, j in enumerate(t.touches):
            if j in owner:
                rows.append((j, owner[j], (ti, li)))
            else:
                owner[j] = (ti, li)
    n_c = len(rows)
    subs = []
    for ti, t in enumerate(terms):
        n_loc = len(t.touches)
        A = np.zeros((n_c, n_loc))
        for r, (_, own, cpy) in enumerate(rows):
            if own[0] == ti:
                A[r, own[1]] += 1.0
            if cpy[0] == ti:
                A[r, cpy[1]] -= 1.0
        loc_lb = None if lb is None else [np.asarray(lb, float)[j] for j in t.touches]
        loc_ub = None if ub is None else [np.asarray(ub, float)[j] for j in t.touches]
        loc_z0 = None if x0 is None else [np.asarray(x0, float)[j] for j in t.touches]
        subs.append(
            Subproblem(t.f, g=t.g, h=t.h, A=A, lb=loc_lb, ub=loc_ub, p=t.p, z0=loc_z0)
        )
    return LiftResult(SeparableProblem(subs, b=np.zeros(n_c)), owner)


# ---------------------------------------------------------------------------
# solver options
# ---------------------------------------------------------------------------

HESSIAN_MODES = ("exact", "bfgs", "dbfgs")
VARIANTS = ("fullspace", "nullspace", "bilevel")
INNER_ALGS = ("dcg", "dadmm")


@dataclass
class SolverOptions:
    """Algorithm parameters; defaults are this library's choices.

    max_iter : outer iteration cap (default 100).
    term_eps : termination tolerance on both stopping norms; 0 disables the
        check and the solver always runs max_iter iterations.
    step_size : primal/dual step length in (0, 1]; 1 is the full step.
    sigma_init : initial proximal weight, Sigma_i = sigma_init * I.
    mu_init : initial slack penalty; the coordination slack weight matrix is
        Delta = (mu/2) * I so the full-space and reduced paths coincide.
    r_sigma, r_delta : per-iteration growth factors for Sigma_i and Delta.
    sigma_max, delta_max : growth stops once the pre-update inf-norm reaches
        these caps.
    act_margin : inequality rows with value > -act_margin count as active.
    hessian : "exact" (with optional regularization), "bfgs", or "dbfgs".
    reg, reg_param : eigenvalue-flip regularization switch and its floor.
    variant : "fullspace", "nullspace" (reduced coordination QP), or
        "bilevel" (reduced QP solved by a decentralized inner algorithm).
    inner_alg, inner_iter : decentralized inner solver and its iteration cap.
    rho_admm : penalty parameter shared by the ADMM baseline and the
        decentralized inner ADMM.
    warm_start : reuse the previous dual to initialize the inner solver.
    del_up : rowwise Delta growth driven by per-row consensus violation
        (beta, gamma); valid only with the fullspace variant.
    parallel : fan per-block work out to a thread pool.
    log_every : print one progress line every N outer iterations (0 = quiet).
    local_tol_floor : tightest tolerance handed to the local solver.
    """

    max_iter: int = 100
    term_eps: float = 1e-8
    step_size: float = 1.0
    sigma_init: float = 1.0
    mu_init: float = 1e3
    r_sigma: float = 2.0
    r_delta: float = 2.0
    sigma_max: float = 1e6
    delta_max: float = 1e6
    act_margin: float = 1e-6
    hessian: str = "exact"
    reg: bool = True
    reg_param: float = 1e-4
    variant: str = "fullspace"
    inner_alg: str = "dcg"
    inner_iter: int = 20
    rho_admm: float = 1e2
    warm_start: bool = True
    del_up: bool = False
    beta: float = 10.0
    gamma: float = 0.25
    parallel: bool = False
    log_every: int = 0
    local_tol_floor: float = 1e-12

    def check(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if self.term_eps < 0:
            raise ValueError("term_eps must be nonnegative")
        if not 0.0 < self.step_size <= 1.0:
            raise ValueError("step_size must lie in (0, 1]")
        for nm in ("sigma_init", "mu_init", "sigma_max", "delta_max",
                   "act_margin", "reg_param", "rho_admm", "local_tol_floor"):
            if getattr(self, nm) <= 0:
                raise ValueError(f"{nm} must be positive")
        if self.r_sigma <= 1 or self.r_delta <= 1:
            raise ValueError("growth factors must exceed 1")
        if self.beta <= 1:
            raise ValueError("beta must exceed 1")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.inner_iter < 1:
            raise ValueError("inner_iter must be positive")
        if self.hessian not in HESSIAN_MODES:
            raise ValueError(f"hessian must be one of {HESSIAN_MODES}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.inner_alg not in INNER_ALGS:
            raise ValueError(f"inner_alg must be one of {INNER_ALGS}")
        if self.del_up and self.variant != "fullspace":
            # rowwise Delta breaks the Delta = (mu/2) I identity the reduced
            # and bilevel paths rely on
            raise ValueError("del_up requires the fullspace variant")
        return self


# ---------------------------------------------------------------------------
# JSON problem files
# ---------------------------------------------------------------------------

def _bound_from_json(v, n, fill):
    if v is None:
        return np.full(n, fill)
    out = []
    for item in v:
        if item is None:
            out.append(fill)
        elif isinstance(item, str):
            out.append(float(item))
        else:
            out.append(float(item))
    return _as_vec(out, n, "bound")


def problem_from_dict(data):
    """Build a SeparableProblem from the documented JSON structure."""
    if "subproblems" not in data:
        raise ValueError("problem file must contain a 'subproblems' list")
    subs = []
    for k, sd in enumerate(data["subproblems"]):
        try:
            n_x = int(sd["n_x"])
        except KeyError:
            raise ValueError(f"subproblem {k}: missing 'n_x'") from None
        n_p = int(sd.get("n_p", 0))
        f = VectorFunction([ex.expr_from_sexpr(sd["f"])], n_x, n_p)
        g = VectorFunction([ex.expr_from_sexpr(e) for e in sd.get("g", [])], n_x, n_p)
        h = VectorFunction([ex.expr_from_sexpr(e) for e in sd.get("h", [])], n_x, n_p)
        A = sd.get("A")
        subs.append(
            Subproblem(
                f,
                g=g,
                h=h,
                A=A,
                lb=_bound_from_json(sd.get("lb"), n_x, -np.inf),
                ub=_bound_from_json(sd.get("ub"), n_x, np.inf),
                p=sd.get("p"),
                z0=sd.get("z0"),
            )
        )
    n_c = subs[0].A.shape[0] if subs else 0
    b = data.get("b")
    if b is None:
        b = np.zeros(n_c)
    return SeparableProblem(subs, b=b, name=data.get("name", ""))


def _bound_to_json(vec, fill):
    return [None if (not np.isfinite(v) and v == fill) else float(v) for v in vec]


def problem_to_dict(problem):
    data = {"name": problem.name, "b": [float(v) for v in problem.b], "subproblems": []}
    for s in problem.subproblems:
        data["subproblems"].append(
            {
                "n_x": s.n_x,
                "n_p": s.n_p,
                "f": s.f.outputs[0].to_sexpr(),
                "g": [o.to_sexpr() for o in s.g.outputs],
                "h": [o.to_sexpr() for o in s.h.outputs],
                "A": [[float(v) for v in row] for row in s.A],
                "lb": _bound_to_json(s.lb, -np.inf),
                "ub": _bound_to_json(s.ub, np.inf),
                "p": [float(v) for v in s.p0],
                "z0": [float(v) for v in s.z0],
            }
        )
    return data


def load_problem_json(path):
    """Load a problem description from a JSON file (schema in the README)."""
    with open(path) as fh:
        data = json.load(fh)
    return problem_from_dict(data)
