"""Solver and verifier for multi-good sequential screening contracts."""

__version__ = "0.1.0"

from .mech import (  # noqa: F401
    InterimUtilityCurve,
    QuadSpec,
    ThresholdMechanism,
    ic_audit,
    revenue_direct,
    revenue_functional,
    revenue_impulse_form,
    solve_thresholds,
    upfront_t1,
    virtual_value,
)
from .model import JointModel, build_model  # noqa: F401
from .numerics import RngStream, uniform_draws  # noqa: F401
from .oracle import (  # noqa: F401
    DiscreteInstance,
    DiscreteMechanism,
    SolveReport,
    compare_regimes,
    discretize,
    solve_relaxed,
    solve_sequential,
    solve_simultaneous,
)
