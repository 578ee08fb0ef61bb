"""Quantal synaptic dilution: beta-distributed dropout for rectifier networks."""

from .dilution import (
    CoefficientBatch,
    DilutionConfig,
    DilutionMode,
    apply,
    derived_beta,
    expected_coefficient,
    sample_coefficients,
)
from .stochastics import RngStream, bernoulli, beta_pdf, beta_sample, gamma_sample, ln_gamma, uniform

__all__ = [
    "CoefficientBatch",
    "DilutionConfig",
    "DilutionMode",
    "RngStream",
    "apply",
    "bernoulli",
    "beta_pdf",
    "beta_sample",
    "derived_beta",
    "expected_coefficient",
    "gamma_sample",
    "ln_gamma",
    "sample_coefficients",
    "uniform",
]
