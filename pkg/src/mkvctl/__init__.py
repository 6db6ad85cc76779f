"""Optimal control of McKean-Vlasov dynamics: direct, randomized and BSDE value routes."""
from .errors import *  # noqa: F401,F403
from .measures import EmpiricalMeasure, dirac, empirical_from_samples, moment_norm, wasserstein2
from .problem import (ActionSpace, BenchmarkProblem, CoefficientSet, LQParams, assumption_audit,
                      get_problem, lq_riccati_value, registry)
from .forward_sim import (GaussianSampler, StepControl, TimeGrid, evaluate_control, flow_check,
                          gain_estimate, simulate_coupled)
from .control_opt import (SimConfig, enumerate_step_controls, krylov_distance, stability_probe, value_direct,
                          value_mkv)
from .randomized import (IntensityControl, MarkIntensity, PoissonPath, build_randomized_control,
                         build_shifted_control, girsanov_weight, randomized_gain, sample_poisson_path,
                         value_randomized)
from .bsde import dpp_check, driver_eval, dual_check, feynman_kac_check, minimal_solution, solve_penalized

__version__ = "0.1.0"
