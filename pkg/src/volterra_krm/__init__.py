"""Regularized Volterra series identification with structured kernels."""

__version__ = "0.1.0"

from .errors import (AllRestartsFailed, ConstraintUnsatisfiable, DegenerateFirstOrder, DegenerateReference,
                     InsufficientData, NonFinite, NonPolynomial, SeparationCheckFailed, SingularCore,
                     SizeExceeded, VolterraKrmError, ZeroSignal)
from .kernels import DcParams, KernelHyper, ZetaSpec, ZetaVariant, dense_kernel_matrix, min_eig_check
from .output_kernel import InitPolicy, build_regressor
from .separable import (InputFamily, LowRankSolver, SeparableInputDesc, assemble_q_generators,
                        eb_cost_fast, predict_fast, separability_rank, separate_input)
from .estimator import (VARIANTS, FitConfig, FitData, FitPath, OptimizerConfig, decompose_wiener,
                        eb_objective, extract_map, fit, predict)
from .simulator import (LtiSystem, WhSystem, build_databank, generate_input, random_stable_lti,
                        simulate_wh, true_volterra_maps)
from .metrics import FitReport, benchmark_timing, gfit, nfit, pfit, run_monte_carlo

__all__ = [
    "AllRestartsFailed",
    "ConstraintUnsatisfiable",
    "DegenerateFirstOrder",
    "DegenerateReference",
    "InsufficientData",
    "NonFinite",
    "NonPolynomial",
    "SeparationCheckFailed",
    "SingularCore",
    "SizeExceeded",
    "VolterraKrmError",
    "ZeroSignal",
    "DcParams",
    "KernelHyper",
    "ZetaSpec",
    "ZetaVariant",
    "dense_kernel_matrix",
    "min_eig_check",
    "InitPolicy",
    "build_regressor",
    "InputFamily",
    "LowRankSolver",
    "SeparableInputDesc",
    "assemble_q_generators",
    "eb_cost_fast",
    "predict_fast",
    "separability_rank",
    "separate_input",
    "VARIANTS",
    "FitConfig",
    "FitData",
    "FitPath",
    "OptimizerConfig",
    "decompose_wiener",
    "eb_objective",
    "extract_map",
    "fit",
    "predict",
    "LtiSystem",
    "WhSystem",
    "build_databank",
    "generate_input",
    "random_stable_lti",
    "simulate_wh",
    "true_volterra_maps",
    "FitReport",
    "benchmark_timing",
    "gfit",
    "nfit",
    "pfit",
    "run_monte_carlo",
]
