"""Bilinear equalizers for the massive MIMO uplink.

Channel statistics, optimal bilinear equalizers and baseline filters,
closed-form and asymptotic SINRs, and seeded Monte-Carlo sweeps.
"""

from .channel_model import (
    AngularDensity,
    CovarianceModel,
    Scenario,
    build_scenario,
    circulant_covariance,
    steering_vector,
    toeplitz_circulant_gap,
    toeplitz_covariance,
)
from .config import ConfigError, ScenarioConfig, parse_config, parse_config_text
from .equalizers import (
    EqualizerBank,
    Transformation,
    baseline_matched_filters,
    bilinear_filter,
    diagonal_obe,
    lmmse_filter,
    mmse_zero_forcing,
    obe_oracle_vectorized,
    obe_transformations,
)
from .montecarlo import SweepResult, SweepSpec, run_sweep, run_trial
from .sinr_analysis import (
    GammaMatrix,
    asymptotic_sinr,
    bilinear_sinr,
    condition_diagnostics,
    conditional_sinr,
    gamma_matrix,
    gamma_ula_limit,
    lmmse_deterministic_sinr,
    low_snr_sinr,
    obe_sinr_closed_form,
)
from .training import ls_observations, mmse_channel_estimate, sample_channels

__version__ = "0.1.0"
