"""Variational data assimilation on a shallow-water torus.

Strong-constraint 4D-Var whose background precision is propagated through
the Jacobian chains of previous assimilation windows, next to ensemble
Kalman filter and hybrid baselines, all driven by a reproducible
experiment harness.
"""

__version__ = "0.1.0"

from .background import (ImplicitBackground, WindowRecord,
                         correlation_profile)
from .dynamics import (ModelParams, Trajectory, integrate, step, tendency,
                       total_energy, total_mass)
from .enkf import (Ensemble, HybridBackground, LocalizationSpec,
                   en4dvar_assimilate, enkf_analysis, enkf_forecast,
                   enkf_init)
from .errors import (ConfigError, DivergenceError, PcgBreakdownError,
                     SparsityError, Sw4dvarError)
from .harness import (ExperimentConfig, MetricSeries, preset_desk,
                      preset_paper_benchmark, relative_error, run_experiment,
                      run_single, sweep)
from .jacobians import (JacobianChain, SparseJacobian, build_chain,
                        chain_apply, default_substeps)
from .models import LinearModel, SweModel
from .observations import (ObsOperator, ObservationSet,
                           generate_observations, make_operator, observe,
                           observe_transpose)
from .var4d import (DiagonalBackground, MapResult, SolverOptions,
                    WindowProblem, assimilate_window, gauss_newton,
                    gn_hessian_vec, pcg_solve)

__all__ = [
    "ConfigError",
    "DiagonalBackground",
    "DivergenceError",
    "Ensemble",
    "ExperimentConfig",
    "HybridBackground",
    "ImplicitBackground",
    "JacobianChain",
    "LinearModel",
    "LocalizationSpec",
    "MapResult",
    "MetricSeries",
    "ModelParams",
    "ObsOperator",
    "ObservationSet",
    "PcgBreakdownError",
    "SolverOptions",
    "SparseJacobian",
    "SparsityError",
    "Sw4dvarError",
    "SweModel",
    "Trajectory",
    "WindowProblem",
    "WindowRecord",
    "__version__",
    "assimilate_window",
    "build_chain",
    "chain_apply",
    "correlation_profile",
    "default_substeps",
    "en4dvar_assimilate",
    "enkf_analysis",
    "enkf_forecast",
    "enkf_init",
    "gauss_newton",
    "generate_observations",
    "gn_hessian_vec",
    "integrate",
    "make_operator",
    "observe",
    "observe_transpose",
    "pcg_solve",
    "preset_desk",
    "preset_paper_benchmark",
    "relative_error",
    "run_experiment",
    "run_single",
    "step",
    "sweep",
    "tendency",
    "total_energy",
    "total_mass",
]
