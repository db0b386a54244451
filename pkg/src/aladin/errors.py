"""Exception types shared across the solver modules."""


class SolverError(RuntimeError):
    """Base class for failures raised by the solver stack."""


class LicqError(SolverError):
    """Active-constraint Jacobian lost full row rank (LICQ violation)."""


class SingularKktError(SolverError):
    """A KKT system was singular or its solution failed the residual check."""


class InnerBreakdownError(SolverError):
    """Decentralized inner solver hit an impossible state (e.g. sigma <= 0)."""
