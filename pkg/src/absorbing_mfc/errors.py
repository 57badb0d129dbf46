"""Failure types shared by the solvers."""

from __future__ import annotations


class CFLError(ValueError):
    """Time step too large for an explicit part of a scheme."""

    def __init__(self, msg: str, suggested_nt: int | None = None):
        super().__init__(msg)
        self.suggested_nt = suggested_nt


class SchemeFailureError(RuntimeError):
    """A scheme produced values outside its guaranteed bounds."""


class SolverDivergenceError(RuntimeError):
    """Fixed-point iteration diverged; carries the residual history."""

    def __init__(self, msg: str, history=None):
        super().__init__(msg)
        self.history = list(history or [])


class MemoryGuardError(ValueError):
    """Requested tensor solve exceeds the configured memory budget."""


class BarrierConstructionError(RuntimeError):
    """No feasible slope/collar pair under the requested resolution."""
