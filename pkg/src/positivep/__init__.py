"""Stochastic simulation of coupled boson modes and multi-level emitters.

Normally ordered Hamiltonians over phase-space variables are compiled into
Ito stochastic differential equations whose weighted trajectory averages
reproduce normally ordered quantum expectation values; a truncated
Hilbert-space master-equation solver provides the exact reference.
"""

from .algebra import (
    ExactnessReport,
    FieldOp,
    HamiltonianIR,
    Monomial,
    PhaseSymbol,
    Polynomial,
    SigmaOp,
    cvar,
    cvar_dag,
    dagger,
    differentiate,
    emitter_rho,
    evaluate,
    field_amp,
    field_amp_dag,
    substitute_sigma,
    to_cvariables,
    validate_exactness,
)
from .dsl import DSLError, parse_gauge, parse_model
from .model import (
    EmitterSpec,
    InitialStateSpec,
    LindbladSpec,
    ModeSpec,
    ModelError,
    ModelSpec,
)

__version__ = "0.1.0"
