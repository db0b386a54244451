"""Expression graphs with exact symbolic differentiation.

Objective and constraint functions are built as immutable DAGs over decision
variables ``var(i)`` and parameters ``param(j)``.  Derivatives (gradients,
Jacobians, Lagrangian Hessians) are obtained by symbolic graph rewriting with
constant folding; the resulting graphs are cached per function, so repeated
evaluation at new points never rebuilds anything.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Expression",
    "VectorFunction",
    "DomainEvalError",
    "const",
    "var",
    "param",
    "neg",
    "exp",
    "log",
    "sin",
    "cos",
    "sqrt",
    "square",
    "evaluate",
    "gradient",
    "jacobian",
    "lagrangian_hessian",
    "expr_from_sexpr",
]

UNARY_OPS = ("neg", "exp", "log", "sin", "cos", "sqrt", "square")
BINARY_OPS = ("add", "sub", "mul", "div", "pow")


class DomainEvalError(ArithmeticError):
    """Evaluation hit an invalid operand (log/sqrt of a negative, zero divide)."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


@dataclass(frozen=True)
class Expression:
    """One node of an immutable expression DAG.

    ``kind`` is ``"const"``, ``"var"``, ``"param"`` or an operator name from
    ``UNARY_OPS`` / ``BINARY_OPS``.  Leaves carry ``value`` (constants) or
    ``index`` (variables/parameters); interior nodes reference children in
    ``args``.
    """

    kind: str
    value: float = 0.0
    index: int = 0
    args: tuple["Expression", ...] = field(default=())

    # -- sugar so graphs can be written as ordinary arithmetic -------------
    def __add__(self, other):
        return _binary("add", self, _wrap(other))

    def __radd__(self, other):
        return _binary("add", _wrap(other), self)

    def __sub__(self, other):
        return _binary("sub", self, _wrap(other))

    def __rsub__(self, other):
        return _binary("sub", _wrap(other), self)

    def __mul__(self, other):
        return _binary("mul", self, _wrap(other))

    def __rmul__(self, other):
        return _binary("mul", _wrap(other), self)

    def __truediv__(self, other):
        return _binary("div", self, _wrap(other))

    def __rtruediv__(self, other):
        return _binary("div", _wrap(other), self)

    def __pow__(self, other):
        return _binary("pow", self, _wrap(other))

    def __neg__(self):
        return _unary("neg", self)

    def __repr__(self):
        return f"Expression({self.to_sexpr()!r})"

    def to_sexpr(self):
        """Render as the nested-list prefix form used by the JSON schema."""
        if self.kind == "const":
            return self.value
        if self.kind == "var":
            return ["var", self.index]
        if self.kind == "param":
            return ["param", self.index]
        return [self.kind] + [a.to_sexpr() for a in self.args]


def _wrap(x):
    if isinstance(x, Expression):
        return x
    return const(float(x))


def const(value):
    return Expression("const", value=float(value))


def var(index):
    if index < 0:
        raise ValueError("variable index must be nonnegative")
    return Expression("var", index=int(index))


def param(index):
    if index < 0:
        raise ValueError("parameter index must be nonnegative")
    return Expression("param", index=int(index))


_ZERO = const(0.0)
_ONE = const(1.0)


def _is_const(e, v=None):
    return e.kind == "const" and (v is None or e.value == v)


def _unary(op, a):
    if a.kind == "const":
        return const(_apply_unary(op, a.value, None))
    return Expression(op, args=(a,))


def _binary(op, a, b):
    if a.kind == "const" and b.kind == "const":
        return const(_apply_binary(op, a.value, b.value, None))
    # identity folds keep derivative graphs small
    if op == "add":
        if _is_const(a, 0.0):
            return b
        if _is_const(b, 0.0):
            return a
    elif op == "sub":
        if _is_const(b, 0.0):
            return a
        if _is_const(a, 0.0):
            return _unary("neg", b)
    elif op == "mul":
        if _is_const(a, 0.0) or _is_const(b, 0.0):
            return _ZERO
        if _is_const(a, 1.0):
            return b
        if _is_const(b, 1.0):
            return a
    elif op == "div":
        if _is_const(a, 0.0):
            return _ZERO
        if _is_const(b, 1.0):
            return a
    elif op == "pow":
        if _is_const(b, 1.0):
            return a
        if _is_const(b, 0.0):
            return _ONE
        if _is_const(b, 2.0):
            return _unary("square", a)
    return Expression(op, args=(a, b))


def neg(a):
    return _unary("neg", _wrap(a))


def exp(a):
    return _unary("exp", _wrap(a))


def log(a):
    return _unary("log", _wrap(a))


def sin(a):
    return _unary("sin", _wrap(a))


def cos(a):
    return _unary("cos", _wrap(a))


def sqrt(a):
    return _unary("sqrt", _wrap(a))


def square(a):
    return _unary("square", _wrap(a))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _apply_unary(op, u, node):
    try:
        if op == "neg":
            return -u
        if op == "exp":
            return math.exp(u)
        if op == "log":
            if u <= 0.0:
                raise DomainEvalError(f"log of non-positive value {u!r}", node)
            return math.log(u)
        if op == "sin":
            return math.sin(u)
        if op == "cos":
            return math.cos(u)
        if op == "sqrt":
            if u < 0.0:
                raise DomainEvalError(f"sqrt of negative value {u!r}", node)
            return math.sqrt(u)
        if op == "square":
            return u * u
    except OverflowError:
        return math.inf if op != "neg" else -math.inf
    raise ValueError(f"unknown unary op {op!r}")


def _apply_binary(op, u, v, node):
    try:
        if op == "add":
            return u + v
        if op == "sub":
            return u - v
        if op == "mul":
            return u * v
        if op == "div":
            if v == 0.0:
                raise DomainEvalError("division by zero", node)
            return u / v
        if op == "pow":
            try:
                return math.pow(u, v)
            except ValueError:
                raise DomainEvalError(
                    f"pow({u!r}, {v!r}) is undefined over the reals", node
                ) from None
    except OverflowError:
        return math.inf
    raise ValueError(f"unknown binary op {op!r}")


def _eval_nodes(roots, x, p, memo):
    """Post-order evaluation of several roots sharing one memo table.

    Iterative (explicit stack) so deep derivative graphs cannot overflow the
    Python recursion limit.  ``memo`` maps id(node) -> float.
    """
    for root in roots:
        stack = [root]
        while stack:
            node = stack[-1]
            key = id(node)
            if key in memo:
                stack.pop()
                continue
            pending = [a for a in node.args if id(a) not in memo]
            if pending:
                stack.extend(pending)
                continue
            stack.pop()
            kind = node.kind
            if kind == "const":
                memo[key] = node.value
            elif kind == "var":
                memo[key] = x[node.index]
            elif kind == "param":
                memo[key] = p[node.index]
            elif kind in UNARY_OPS:
                memo[key] = _apply_unary(kind, memo[id(node.args[0])], node)
            else:
                memo[key] = _apply_binary(
                    kind, memo[id(node.args[0])], memo[id(node.args[1])], node
                )
    return memo


# ---------------------------------------------------------------------------
# symbolic differentiation
# ---------------------------------------------------------------------------

def diff(e, index):
    """Derivative graph of ``e`` with respect to ``var(index)``."""
    return _diff_memo(e, index, {})


def _diff_memo(e, i, memo):
    key = id(e)
    if key in memo:
        return memo[key]
    kind = e.kind
    if kind == "const" or kind == "param":
        d = _ZERO
    elif kind == "var":
        d = _ONE if e.index == i else _ZERO
    elif kind in UNARY_OPS:
        (a,) = e.args
        da = _diff_memo(a, i, memo)
        if kind == "neg":
            d = _unary("neg", da)
        elif kind == "exp":
            d = _binary("mul", e, da)
        elif kind == "log":
            d = _binary("div", da, a)
        elif kind == "sin":
            d = _binary("mul", _unary("cos", a), da)
        elif kind == "cos":
            d = _unary("neg", _binary("mul", _unary("sin", a), da))
        elif kind == "sqrt":
            d = _binary("div", da, _binary("mul", const(2.0), e))
        else:  # square
            d = _binary("mul", _binary("mul", const(2.0), a), da)
    else:
        a, b = e.args
        da = _diff_memo(a, i, memo)
        db = _diff_memo(b, i, memo)
        if kind == "add":
            d = _binary("add", da, db)
        elif kind == "sub":
            d = _binary("sub", da, db)
        elif kind == "mul":
            d = _binary("add", _binary("mul", da, b), _binary("mul", a, db))
        elif kind == "div":
            d = _binary(
                "sub",
                _binary("div", da, b),
                _binary("div", _binary("mul", a, db), _unary("square", b)),
            )
        else:  # pow
            if b.kind == "const":
                c = b.value
                d = _binary(
                    "mul",
                    _binary("mul", b, _binary("pow", a, const(c - 1.0))),
                    da,
                )
            elif a.kind == "const":
                d = _binary("mul", _binary("mul", e, _unary("log", a)), db)
            else:
                # u^v with both varying: u^v * (v' log u + v u'/u)
                inner = _binary(
                    "add",
                    _binary("mul", db, _unary("log", a)),
                    _binary("div", _binary("mul", b, da), a),
                )
                d = _binary("mul", e, inner)
    memo[key] = d
    return d


def _collect_indices(e, kind, seen, out):
    stack = [e]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.kind == kind:
            out.add(node.index)
        stack.extend(node.args)


# ---------------------------------------------------------------------------
# vector functions
# ---------------------------------------------------------------------------

class VectorFunction:
    """A list of scalar expression outputs over (x, p) of fixed dimensions.

    Derivative graphs are built lazily on first use and cached; instances are
    therefore cheap to reuse across many solves and safe to evaluate from
    multiple threads (cache construction is idempotent).
    """

    def __init__(self, outputs, n_x, n_p=0):
        outputs = tuple(_wrap(o) for o in outputs)
        self.outputs = outputs
        self.n_x = int(n_x)
        self.n_p = int(n_p)
        seen = set()
        vs, ps = set(), set()
        for o in outputs:
            _collect_indices(o, "var", seen, vs)
        seen = set()
        for o in outputs:
            _collect_indices(o, "param", seen, ps)
        if vs and max(vs) >= self.n_x:
            raise ValueError(
                f"variable index {max(vs)} out of range for n_x={self.n_x}"
            )
        if ps and max(ps) >= self.n_p:
            raise ValueError(
                f"parameter index {max(ps)} out of range for n_p={self.n_p}"
            )
        self._grad_graphs = None
        self._hess_graphs = None

    @property
    def n_out(self):
        return len(self.outputs)

    def __repr__(self):
        return f"VectorFunction(n_out={self.n_out}, n_x={self.n_x}, n_p={self.n_p})"

    # -- cache builders -----------------------------------------------------
    def _grads(self):
        if self._grad_graphs is None:
            self._grad_graphs = tuple(
                tuple(diff(o, i) for i in range(self.n_x)) for o in self.outputs
            )
        return self._grad_graphs

    def _hessians(self):
        # upper triangle only; mirrored at evaluation for exact symmetry
        if self._hess_graphs is None:
            grads = self._grads()
            self._hess_graphs = tuple(
                tuple(
                    tuple(diff(g[i], j) for j in range(i, self.n_x))
                    for i in range(self.n_x)
                )
                for g in grads
            )
        return self._hess_graphs

    def _check_args(self, x, p):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_x,):
            raise ValueError(f"expected x of length {self.n_x}, got shape {x.shape}")
        if p is None:
            p = np.zeros(self.n_p)
        else:
            p = np.asarray(p, dtype=float)
        if p.shape != (self.n_p,):
            raise ValueError(f"expected p of length {self.n_p}, got shape {p.shape}")
        return x, p


def evaluate(fun, x, p=None):
    """Evaluate ``fun`` at (x, p); returns a vector of length ``fun.n_out``."""
    x, p = fun._check_args(x, p)
    memo = _eval_nodes(fun.outputs, x, p, {})
    return np.array([memo[id(o)] for o in fun.outputs])


def gradient(fun, x, p=None):
    """Exact gradient of a scalar (single-output) function."""
    if fun.n_out != 1:
        raise ValueError("gradient requires a scalar function")
    x, p = fun._check_args(x, p)
    graphs = fun._grads()[0]
    memo = _eval_nodes(graphs, x, p, {})
    return np.array([memo[id(g)] for g in graphs])


def jacobian(fun, x, p=None):
    """Exact Jacobian, one row per output; shape (n_out, n_x)."""
    x, p = fun._check_args(x, p)
    if fun.n_out == 0:
        return np.zeros((0, fun.n_x))
    grads = fun._grads()
    memo = _eval_nodes((g for row in grads for g in row), x, p, {})
    return np.array([[memo[id(g)] for g in row] for row in grads])


def _hessian_single(fun, j, x, p, memo):
    n = fun.n_x
    rows = fun._hessians()[j]
    _eval_nodes((g for row in rows for g in row), x, p, memo)
    H = np.zeros((n, n))
    for i in range(n):
        for k, g in enumerate(rows[i]):
            v = memo[id(g)]
            H[i, i + k] = v
            H[i + k, i] = v
    return H


def lagrangian_hessian(f, g, h_active, x, p, kappa, mult_active):
    """Hessian of f + kappa.g + mult.h_active; exactly symmetric by mirroring.

    Box-constraint terms are affine and contribute nothing here, so callers
    pass only the nonlinear active inequalities.
    """
    if f.n_out != 1:
        raise ValueError("objective must be scalar")
    kappa = np.asarray(kappa, dtype=float)
    mult_active = np.asarray(mult_active, dtype=float)
    if kappa.shape != (g.n_out,):
        raise ValueError("multiplier length does not match equality outputs")
    if mult_active.shape != (h_active.n_out,):
        raise ValueError("multiplier length does not match inequality outputs")
    x, p = f._check_args(x, p)
    memo = {}
    H = _hessian_single(f, 0, x, p, memo)
    for j in range(g.n_out):
        if kappa[j] != 0.0:
            H += kappa[j] * _hessian_single(g, j, x, p, memo)
    for j in range(h_active.n_out):
        if mult_active[j] != 0.0:
            H += mult_active[j] * _hessian_single(h_active, j, x, p, memo)
    return H


# ---------------------------------------------------------------------------
# prefix s-expression form (JSON problem files)
# ---------------------------------------------------------------------------

_SEXPR_UNARY = set(UNARY_OPS)
_SEXPR_BINARY = set(BINARY_OPS)


def expr_from_sexpr(obj):
    """Build an Expression from the nested-list prefix form.

    Numbers are constants; ``["var", i]`` / ``["param", i]`` are leaves;
    operator forms are ``["add", a, b]``, ``["neg", a]``, etc.
    """
    if isinstance(obj, (int, float)):
        return const(obj)
    if not isinstance(obj, (list, tuple)) or not obj:
        raise ValueError(f"malformed expression: {obj!r}")
    head = obj[0]
    if head == "var":
        if len(obj) != 2:
            raise ValueError(f"malformed var node: {obj!r}")
        return var(int(obj[1]))
    if head == "param":
        if len(obj) != 2:
            raise ValueError(f"malformed param node: {obj!r}")
        return param(int(obj[1]))
    if head in _SEXPR_UNARY:
        if len(obj) != 2:
            raise ValueError(f"{head} takes one argument: {obj!r}")
        return _unary(head, expr_from_sexpr(obj[1]))
    if head in _SEXPR_BINARY:
        if len(obj) != 3:
            raise ValueError(f"{head} takes two arguments: {obj!r}")
        return _binary(head, expr_from_sexpr(obj[1]), expr_from_sexpr(obj[2]))
    raise ValueError(f"unknown operator {head!r}")
