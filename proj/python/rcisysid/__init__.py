"""qLPV identification with robust control invariant sets."""

from ._core import (  # noqa: F401
    ConfigError,
    InfeasibleError,
    NumericalError,
    QlpvModel,
    bfr,
    fit_lti,
    gen_msd_chain,
    gen_trigonometric,
    load_model,
    lump_constant_branches,
    run_pipeline,
    simulate,
    solve_qp,
)

__all__ = [name for name in dir() if not name.startswith("_")]
