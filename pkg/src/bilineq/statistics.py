"""Second-order quantities shared by equalizer design and SINR analysis."""

from __future__ import annotations

import numpy as np
import scipy.linalg


class HermitianFactor:
    """Cholesky factor of a Hermitian positive definite matrix, used for solves."""

    def __init__(self, a):
        self.shape = a.shape
        self._cf = scipy.linalg.cho_factor(a, lower=True, check_finite=False)

    def solve(self, b):
        return scipy.linalg.cho_solve(self._cf, b, check_finite=False)

    def solve_right(self, b):
        """``b @ A^{-1}`` for Hermitian ``A``."""
        return self.solve(b.conj().T).conj().T


def observation_covariance(scenario, bs, group):
    """Q = sum_{k in group} C_k + I / rho_tr."""
    group = np.atleast_1d(group)
    if group.size == 0:
        raise ValueError("pilot group is empty")
    return scenario.cov[bs, group].sum(axis=0) + np.eye(scenario.M) / scenario.rho_tr


def error_covariance(c, q_factor):
    """C - C Q^{-1} C."""
    e = c - c @ q_factor.solve(c)
    return 0.5 * (e + e.conj().T)


def weighted_covariances(scenario, bs, group, z_factor=None, q_factor=None):
    """W_l = Z^{-1} C_l Q^{-1} for every user ``l`` in the group (shape K_p x M x M)."""
    if z_factor is None:
        z_factor = HermitianFactor(scenario.Z(bs))
    if q_factor is None:
        q_factor = HermitianFactor(observation_covariance(scenario, bs, group))
    covs = scenario.cov[bs, group]
    return np.stack([q_factor.solve_right(z_factor.solve(c)) for c in covs])


def gamma_from_weighted(covs, weighted):
    """[Gamma]_{nk} = tr(C_n W_k) / M, Hermitized."""
    M = covs.shape[-1]
    # tr(C_n W_k) = sum_ij C_n[j, i] W_k[i, j]
    g = np.einsum("nji,kij->nk", covs, weighted) / M
    return 0.5 * (g + g.conj().T)


def spectral_gamma(spectra, group, powers, rho_tr, error_spectra=None):
    """Gamma for covariances sharing one eigenbasis, from their eigenvalues.

    ``spectra`` is (K, M) for all users at one base station. With
    ``error_spectra`` the received covariance uses estimation-error
    eigenvalues instead (the LMMSE flavor).
    """
    M = spectra.shape[-1]
    z_src = spectra if error_spectra is None else error_spectra
    z = 1.0 + powers @ z_src
    q = spectra[group].sum(axis=0) + 1.0 / rho_tr
    xi = spectra[group].T  # M x K_p
    return (xi.T / (z * q)) @ xi / M
