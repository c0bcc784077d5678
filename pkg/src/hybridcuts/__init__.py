"""Strong formulations for hybrid control problems with indicator variables.

Feasibility and gradient cuts in the original variable space, a branch and
bound solver over convex relaxations, a synthetic benchmark and a hybrid
electric vehicle MPC case.
"""
from .bench import SyntheticConfig, generate_synthetic, run_benchmark
from .bnb import BnbReport, SolveConfig, solve_miqp
from .bounds import IntervalImage, interval_image, mode_fix_check
from .cuts import (CutConfig, LinearCut, feasibility_cuts_1d, feasibility_cuts_multi, gradient_cut,
                   select_sigma_case, separate, tau_closed_form)
from .model import HcpInstance, VarId, build_epigraph, load_instance, save_instance, validate
from .qpsolve import RelaxPoint, solve_relaxation

__all__ = [
    "BnbReport", "CutConfig", "HcpInstance", "IntervalImage", "LinearCut", "RelaxPoint", "SolveConfig",
    "SyntheticConfig", "VarId", "build_epigraph", "feasibility_cuts_1d", "feasibility_cuts_multi",
    "generate_synthetic", "gradient_cut", "interval_image", "load_instance", "mode_fix_check",
    "run_benchmark", "save_instance", "select_sigma_case", "separate", "solve_miqp", "solve_relaxation",
    "tau_closed_form", "validate",
]
