"""Channel draws, least-squares pilot observations and MMSE channel estimates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .statistics import HermitianFactor, error_covariance, observation_covariance

__all__ = [
    "ChannelRealization",
    "TrainingObservation",
    "ChannelEstimate",
    "covariance_sqrt",
    "sample_channels",
    "ls_observations",
    "observation_covariance",
    "mmse_channel_estimate",
    "standard_complex_normal",
]


@dataclass(frozen=True, eq=False)
class ChannelRealization:
    h: np.ndarray  # (n_bs, n_users, M)

    def __getitem__(self, key):
        return self.h[key]


@dataclass(frozen=True, eq=False)
class TrainingObservation:
    """LS observations keyed by (base station, pilot index).

    All users with the same pilot share one array object.
    """

    psi: dict
    pilots: np.ndarray

    def for_user(self, bs, k):
        return self.psi[bs, int(self.pilots[k])]


@dataclass(frozen=True, eq=False)
class ChannelEstimate:
    h_hat: np.ndarray
    err_cov: np.ndarray


def standard_complex_normal(rng, shape):
    x = rng.standard_normal((*shape, 2))
    return (x[..., 0] + 1j * x[..., 1]) * np.sqrt(0.5)


def covariance_sqrt(c):
    """Hermitian square root via eigendecomposition; tolerates rank deficiency."""
    lam, vec = np.linalg.eigh(c)
    if lam[0] < -1e-8 * max(lam[-1], 1e-300):
        raise np.linalg.LinAlgError(f"covariance is not PSD (smallest eigenvalue {lam[0]:.3e})")
    return (vec * np.sqrt(np.clip(lam, 0.0, None))) @ vec.conj().T


def _coloring(scenario):
    cached = scenario._cache.get("sqrt")
    if cached is None:
        if scenario.structure == "circulant":
            cached = np.sqrt(np.clip(scenario.spectra, 0.0, None))
        elif scenario.structure == "diagonal":
            cached = np.sqrt(np.clip(scenario.spectra, 0.0, None))
        else:
            cached = np.stack([[covariance_sqrt(c) for c in row] for row in scenario.cov])
        scenario._cache["sqrt"] = cached
    return cached


def color(scenario, z, domain="antenna"):
    """Map white draws ``z`` (n_bs, n_users, M) to channels with the scenario covariances.

    With ``domain="eigen"`` structured scenarios return the channels expressed
    in their shared eigenbasis (no transform is applied).
    """
    factors = _coloring(scenario)
    if domain == "eigen" and scenario.structure != "dense":
        return factors * z
    if scenario.structure == "circulant":
        # C = F diag(f) F^H, so F (sqrt(f) * z) has covariance C
        return np.fft.ifft(factors * z, axis=-1, norm="ortho")
    if scenario.structure == "diagonal":
        return factors * z
    return np.einsum("bkij,bkj->bki", factors, z)


def sample_channels(scenario, rng, domain="antenna"):
    """Independent h ~ CN(0, C) for every (base station, user) pair."""
    z = standard_complex_normal(rng, (scenario.n_bs, scenario.n_users, scenario.M))
    return ChannelRealization(color(scenario, z, domain))


def ls_observations(channels, scenario, rng):
    """psi = sum of the group's channels + w / sqrt(rho_tr), w ~ CN(0, I)."""
    groups = scenario.groups()
    noise = standard_complex_normal(rng, (scenario.n_bs, len(groups), scenario.M))
    scale = 1.0 / np.sqrt(scenario.rho_tr)
    psi = {}
    for b in range(scenario.n_bs):
        for i, g in enumerate(groups):
            pilot = scenario.users[g[0]].pilot
            psi[b, pilot] = channels.h[b, g].sum(axis=0) + scale * noise[b, i]
    return TrainingObservation(psi, scenario.pilots)


def mmse_channel_estimate(obs, scenario, bs, k):
    """h_hat = C Q^{-1} psi and its error covariance C - C Q^{-1} C."""
    group = scenario.group_of(k)
    q = observation_covariance(scenario, bs, group)
    try:
        qf = HermitianFactor(q)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("observation covariance is singular") from exc
    c = scenario.cov[bs, k]
    h_hat = c @ qf.solve(obs.for_user(bs, k))
    return ChannelEstimate(h_hat, error_covariance(c, qf))
