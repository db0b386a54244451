"""Bundled example problems: tutorial, coupled-qp, ocp-chain.

Each builder returns a fresh, validated SeparableProblem.  ``coupled_qp`` is
seeded so identical seeds give identical instances; ``ocp_chain`` exposes the
initial state of each cart through the parameter vector, which is what a
receding-horizon loop updates between solves.
"""

from __future__ import annotations

import numpy as np

from . import expr as ex
from .expr import VectorFunction, var, param
from .problem import SeparableProblem, Subproblem

__all__ = ["example_library", "tutorial", "coupled_qp", "ocp_chain", "EXAMPLE_NAMES"]

EXAMPLE_NAMES = ("tutorial", "coupled-qp", "ocp-chain")


def tutorial():
    """Two blocks, one consensus row, a bilinear inequality pair.

    min 2(x1-1)^2 + (x2-2)^2  s.t. -1 <= x1 x2 <= 1.5, lifted by one copy:
    block 1 owns y1, block 2 owns (y21, y22) with y1 = y21.
    """
    f1 = VectorFunction([2 * ex.square(var(0) - 1)], 1)
    s1 = Subproblem(f1, A=[[1.0]], z0=[1.0])
    f2 = VectorFunction([ex.square(var(1) - 2)], 2)
    h2 = VectorFunction([-1 - var(0) * var(1), -1.5 + var(0) * var(1)], 2)
    s2 = Subproblem(f2, h=h2, A=[[-1.0, 0.0]], z0=[1.0, 1.0])
    return SeparableProblem([s1, s2], b=[0.0], name="tutorial")


def _quad_expr(Q, q, n):
    terms = []
    for i in range(n):
        terms.append(0.5 * Q[i, i] * ex.square(var(i)))
        if q[i] != 0.0:
            terms.append(q[i] * var(i))
        for j in range(i + 1, n):
            if Q[i, j] != 0.0:
                terms.append(Q[i, j] * var(i) * var(j))
    e = terms[0]
    for t in terms[1:]:
        e = e + t
    return e


def coupled_qp(seed=42, n_blocks=4, block_size=3):
    """Random convex QP blocks chained by overlapping consensus rows.

    Row j couples the first variable of block j to the second variable of
    block j+1; blocks in the interior of the chain therefore share rows with
    both neighbors, giving the decentralized paths a non-trivial topology.
    """
    rng = np.random.default_rng(seed)
    n_c = n_blocks - 1
    subs = []
    for i in range(n_blocks):
        M = rng.standard_normal((block_size, block_size))
        Q = M @ M.T + block_size * np.eye(block_size)
        q = rng.standard_normal(block_size)
        A = np.zeros((n_c, block_size))
        if i < n_blocks - 1:
            A[i, 0] = 1.0
        if i > 0:
            A[i - 1, 1] = -1.0
        subs.append(
            Subproblem(
                VectorFunction([_quad_expr(Q, q, block_size)], block_size),
                A=A,
                z0=rng.standard_normal(block_size) * 0.1,
            )
        )
    return SeparableProblem(subs, b=np.zeros(n_c), name=f"coupled-qp(seed={seed})")


def ocp_chain(horizon=5, dt=0.2, u_max=1.0):
    """Finite-horizon control of three coupled double integrators.

    Cart i tracks its setpoint while a quadratic spring couples it to its
    chain neighbors' positions; each cart optimizes over local copies of
    those neighbor trajectories and consensus rows pin every copy to the
    owner's actual states.  Dynamics (and the parametric initial condition)
    enter as equality constraints, input bounds as box constraints.

    Per cart: positions/velocities at knots 0..T, inputs at 0..T-1, then one
    copied neighbor position trajectory (knots 1..T) per neighbor.
    """
    T = horizon
    n_carts = 3
    neighbors = {0: [1], 1: [0, 2], 2: [1]}
    setpoints = [0.0, 1.0, 2.0]
    x_init = [(-1.0, 0.0), (0.5, 0.0), (2.5, 0.0)]
    w_pos, w_vel, w_u, w_spring = 1.0, 0.1, 0.1, 0.5

    def pos(t):
        return 2 * t

    def vel(t):
        return 2 * t + 1

    def inp(t):
        return 2 * (T + 1) + t

    def copy_idx(k, t):
        # k-th neighbor copy, knots 1..T
        return 2 * (T + 1) + T + k * T + (t - 1)

    # consensus layout: for each directed pair (i -> neighbor j) and knot t,
    # one row forcing copy (in i) = position (in j)
    pairs = [(i, j) for i in range(n_carts) for j in neighbors[i]]
    n_c = len(pairs) * T
    subs = []
    for i in range(n_carts):
        n_x = 2 * (T + 1) + T + len(neighbors[i]) * T
        cost = []
        for t in range(T + 1):
            cost.append(w_pos * ex.square(var(pos(t)) - setpoints[i]))
            cost.append(w_vel * ex.square(var(vel(t))))
        for t in range(T):
            cost.append(w_u * ex.square(var(inp(t))))
        for k, j in enumerate(neighbors[i]):
            gap = setpoints[i] - setpoints[j]
            for t in range(1, T + 1):
                cost.append(
                    w_spring * ex.square(var(pos(t)) - var(copy_idx(k, t)) - gap)
                )
        e = cost[0]
        for term in cost[1:]:
            e = e + term
        f = VectorFunction([e], n_x, n_p=2)

        eqs = [var(pos(0)) - param(0), var(vel(0)) - param(1)]
        for t in range(T):
            eqs.append(var(pos(t + 1)) - var(pos(t)) - dt * var(vel(t)))
            eqs.append(var(vel(t + 1)) - var(vel(t)) - dt * var(inp(t)))
        g = VectorFunction(eqs, n_x, n_p=2)

        lb = np.full(n_x, -np.inf)
        ub = np.full(n_x, np.inf)
        for t in range(T):
            lb[inp(t)] = -u_max
            ub[inp(t)] = u_max

        A = np.zeros((n_c, n_x))
        for r, (a, bnb) in enumerate(pairs):
            for t in range(1, T + 1):
                row = r * T + (t - 1)
                if a == i:
                    k = neighbors[i].index(bnb)
                    A[row, copy_idx(k, t)] += 1.0
                if bnb == i:
                    A[row, pos(t)] -= 1.0

        z0 = np.zeros(n_x)
        for t in range(T + 1):
            z0[pos(t)] = x_init[i][0]
        for k, j in enumerate(neighbors[i]):
            for t in range(1, T + 1):
                z0[copy_idx(k, t)] = x_init[j][0]
        subs.append(
            Subproblem(f, g=g, A=A, lb=lb, ub=ub, p=list(x_init[i]), z0=z0)
        )
    return SeparableProblem(subs, b=np.zeros(n_c), name=f"ocp-chain(T={T})")


def example_library(name, **kwargs):
    """Instantiate a bundled example by CLI name."""
    if name == "tutorial":
        return tutorial(**kwargs)
    if name == "coupled-qp":
        return coupled_qp(**kwargs)
    if name == "ocp-chain":
        return ocp_chain(**kwargs)
    raise KeyError(
        f"unknown example {name!r}; available: {', '.join(EXAMPLE_NAMES)}"
    )
