"""Stochastic barrier certificates for unbounded-time safety of polynomial SDEs."""

from .expcert import ExpCertificate, LambdaSpec, check_certificate_sampling, synthesize_exp, validate_lambda
from .pipeline import BoundReport, VerifyConfig, sweep, verify_unbounded
from .polynomial import Polynomial, PolyMatrix, PolyVector, parse_polynomial
from .problem_file import load_problem, load_problem_text
from .sde import SafetyProblem, SdeSystem, SemialgebraicSet, generator_apply
from .sdp import SolverSettings
from .simulate import SimConfig, SimResult, simulate
from .tail import TailBoundModel, find_T_star, find_T_tilde, matrix_exp, tail_bound_at
from .timedep import TimeDepCertificate, bounded_bound, synthesize_timedep

__version__ = "0.1.0"

__all__ = [
    "BoundReport", "ExpCertificate", "LambdaSpec", "PolyMatrix", "PolyVector", "Polynomial",
    "SafetyProblem", "SdeSystem", "SemialgebraicSet", "SimConfig", "SimResult", "SolverSettings",
    "TailBoundModel", "TimeDepCertificate", "VerifyConfig", "bounded_bound", "check_certificate_sampling",
    "find_T_star", "find_T_tilde", "generator_apply", "load_problem", "load_problem_text", "matrix_exp",
    "parse_polynomial", "simulate", "sweep", "synthesize_exp", "synthesize_timedep", "tail_bound_at",
    "validate_lambda", "verify_unbounded",
]
