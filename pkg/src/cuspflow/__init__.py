"""Twisted conical Kähler-Ricci flows on a once-punctured flat torus and their cusp limit."""
from .conical import DEFAULT_LADDER, ConeParams, psi_beta, psi_zero
from .errors import (AbortedRunError, CuspFlowError, DiagnosticUnavailable, InvalidBackgroundError,
                     InvalidMetricError, InvalidSpecError, MissingArtifactError, NonConvergenceError,
                     StepRejectedError)
from .flow import FlowTrace, TimeSchedule, run_flow
from .limits import LadderResult, LadderSpec, run_ladder
from .reports import CheckReport
from .solvers import NewtonConfig, elliptic_ke_solve, implicit_euler_step
from .torus import BackgroundData, TorusSpec, build_background

__all__ = [
    "DEFAULT_LADDER", "ConeParams", "psi_beta", "psi_zero", "AbortedRunError", "CuspFlowError",
    "DiagnosticUnavailable", "InvalidBackgroundError", "InvalidMetricError", "InvalidSpecError",
    "MissingArtifactError", "NonConvergenceError", "StepRejectedError", "FlowTrace", "TimeSchedule",
    "run_flow", "LadderResult", "LadderSpec", "run_ladder", "CheckReport", "NewtonConfig",
    "elliptic_ke_solve", "implicit_euler_step", "BackgroundData", "TorusSpec", "build_background",
]
