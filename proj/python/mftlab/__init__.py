"""Mean-field transformer dynamics: attention flow, adjoint gradients, NTK
and injectivity checks."""

import json

from . import _core
from ._core import (
    AttentionParams,
    ConfigError,
    DepthParameterization,
    DimensionError,
    DivergenceError,
    DomainError,
    Error,
    InvalidInputError,
    ProbeMeasure,
    Sample,
    SizeGateError,
    TokenCloud,
    TrainConfig,
    attention_meanfield,
    attention_single,
    cot_distance,
    cumulant,
    forward_tokens,
    init_parameterization,
    mgf_radius,
    ntk_full_matrix,
    ntk_v_matrix,
    param_gradient,
    refine_depth,
    risk,
    softmax_max_gap,
    softmax_weights,
    upper_gradient_norm,
)

__version__ = _core.__version__


def train(rho0, dataset, config):
    """Runs gradient flow; returns (report, traces, final_rho)."""
    report, traces, final_rho = _core._train(rho0, dataset, config)
    return json.loads(report), traces, final_rho


def lambda_min_profile(rho, dataset, full=False, size_gate=512):
    return json.loads(_core._lambda_min_profile(rho, dataset, full, size_gate))


def independence_sigma_min(measures, mode="weak", direction=None, points=0, scale=2.0, seed=0, threshold=1e-8):
    return json.loads(_core._independence_sigma_min(measures, mode, direction, points, scale, seed, threshold))


def series_independence_check(measures, direction, terms=0):
    return json.loads(_core._series_independence_check(measures, direction, terms))


def pairwise_difference_condition(clouds):
    return json.loads(_core._pairwise_difference_condition(clouds))


def run_config(config_path, out_dir, workers=1):
    """Runs an experiment config; returns the manifest."""
    return json.loads(_core._run_config(str(config_path), str(out_dir), workers))
