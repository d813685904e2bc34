"""Closed-form, asymptotic and conditional SINRs.

Conventions: ``Gamma`` is always normalized by ``M``,
``[Gamma]_{nk} = tr(C_n Z^{-1} C_k Q^{-1}) / M``, and SINRs are linear.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .channel_model import angular_quadrature, to_dft_basis
from .equalizers import SINGULAR_REG, Transformation, covariance_diagonals, error_received_covariance
from .statistics import (
    HermitianFactor,
    error_covariance,
    gamma_from_weighted,
    observation_covariance,
    spectral_gamma,
    weighted_covariances,
)

log = logging.getLogger(__name__)


class SinrError(ValueError):
    pass


class IllConditionedGamma(SinrError):
    def __init__(self, cond):
        super().__init__(f"Gamma is ill-conditioned (condition number {cond:.3e})")
        self.cond = cond


@dataclass(frozen=True, eq=False)
class GammaMatrix:
    group: tuple
    matrix: np.ndarray
    flavor: str = "finite-M"  # "finite-M" | "circulant-limit" | "lmmse"

    def __post_init__(self):
        if self.flavor not in ("finite-M", "circulant-limit", "lmmse"):
            raise ValueError(f"unknown Gamma flavor {self.flavor!r}")

    @property
    def size(self):
        return self.matrix.shape[0]

    def condition(self):
        return float(np.linalg.cond(self.matrix))


@dataclass
class SinrReport:
    """Per-user linear SINRs keyed by ``(method, bound)``."""

    values: dict = field(default_factory=dict)

    def add(self, method, bound, sinr):
        sinr = np.asarray(sinr, dtype=float)
        if np.any(sinr < 0):
            raise SinrError("SINR values must be nonnegative")
        self.values[method, bound] = sinr

    def rate(self, method, bound):
        return np.log2(1.0 + self.values[method, bound])


# ---------------------------------------------------------------------------
# statistical bound
# ---------------------------------------------------------------------------


def bilinear_sinr(t, scenario, bs, k):
    """Statistical SINR of the bilinear equalizer with transformation ``t`` for user ``k``.

    p_k |tr(C_k A)|^2 / (tr(Z A Q A^H) + sum_{n in I_k} p_n |tr(C_n A)|^2)
    """
    if isinstance(t, np.ndarray):
        if not np.any(t):
            raise SinrError("zero transformation")
        t = Transformation(k, matrix=t)
    group = scenario.group_of(k)
    p = scenario.powers
    z = scenario.Z(bs)
    q = observation_covariance(scenario, bs, group)
    if t.is_diagonal:
        a = t.diag
        if t.basis == "dft":
            z, q = to_dft_basis(z), to_dft_basis(q)
        c_hat = covariance_diagonals(scenario, bs, t.basis)
        traces = c_hat[group] @ a  # tr(C_n A) = c_n^T a
        noise = np.real(np.vdot(a, (z * q.T) @ a))
    else:
        a = t.matrix
        traces = np.einsum("nji,ij->n", scenario.cov[bs, group], a)
        noise = np.real(np.trace(z @ a @ q @ a.conj().T))
    own = np.flatnonzero(group == k)[0]
    signal = p[k] * abs(traces[own]) ** 2
    interference = sum(p[n] * abs(traces[i]) ** 2 for i, n in enumerate(group) if n != k)
    den = noise + interference
    if not np.any(a) or den <= 0:
        raise SinrError("zero transformation")
    return float(signal / den)


def cross_terms(transformations, scenario, bs, normalize=True):
    """|tr(C_k A_n)| for all pairs in a group; with ``normalize`` each A_n is
    scaled so that tr(C_n A_n) = sqrt(M)."""
    group = [t.user for t in transformations]
    out = np.empty((len(group), len(group)))
    for j, t in enumerate(transformations):
        if t.is_diagonal:
            traces = covariance_diagonals(scenario, bs, t.basis)[group] @ t.diag
        else:
            traces = np.einsum("nji,ij->n", scenario.cov[bs, group], t.matrix)
        if normalize:
            traces = traces * math.sqrt(scenario.M) / traces[j]
        out[:, j] = np.abs(traces)
    return out


# ---------------------------------------------------------------------------
# Gamma and the OBE closed forms
# ---------------------------------------------------------------------------


def gamma_matrix(scenario, bs, group):
    """Finite-M Gamma of one pilot group at base station ``bs``.

    Uses Z^{-1} C_k Q^{-1} products (O(M^3 K_p)), or the shared eigenvalues
    when the scenario carries them (O(M K_p^2)).
    """
    group = np.atleast_1d(group)
    if scenario.spectra is not None:
        g = spectral_gamma(scenario.spectra[bs], group, scenario.powers, scenario.rho_tr)
    else:
        g = gamma_from_weighted(scenario.cov[bs, group], weighted_covariances(scenario, bs, group))
    return GammaMatrix(tuple(int(k) for k in group), g, "finite-M")


def _regularized_solve(a, b):
    a = 0.5 * (a + a.conj().T)
    try:
        return HermitianFactor(a).solve(b)
    except np.linalg.LinAlgError:
        log.warning("regularizing a singular SINR system with %.0e I", SINGULAR_REG)
        reg = SINGULAR_REG * max(np.trace(a).real / len(a), 1e-300)
        try:
            return HermitianFactor(a + reg * np.eye(len(a))).solve(b)
        except np.linalg.LinAlgError as exc:
            raise SinrError("singular system after regularization") from exc


def _group_powers(gamma, powers):
    powers = np.asarray(powers, dtype=float)
    if powers.ndim == 2:
        powers = np.diag(powers)
    if powers.shape != (gamma.size,):
        raise SinrError("power vector does not match the Gamma dimension")
    if np.any(powers <= 0):
        raise SinrError("powers must be strictly positive")
    return powers


def reformulated_sinr(g, powers, M, k):
    """M p_k e^T G (P^{-1}/M + G)^{-1} e / e^T (P^{-1}/M + G)^{-1} e."""
    x = _regularized_solve(np.diag(1.0 / (M * powers)) + g, np.eye(len(powers))[:, k].astype(complex))
    num = np.real((g @ x)[k])
    den = np.real(x[k])
    return float(M * powers[k] * num / den)


def obe_sinr_closed_form(gamma, powers, M, k):
    """Optimal bilinear-equalizer SINR of group member ``k`` (index within the group)."""
    powers = _group_powers(gamma, powers)
    return reformulated_sinr(gamma.matrix, powers, M, k)


def asymptotic_sinr(gamma, powers, M, k, max_condition=1e12):
    """M p_k / [Gamma^{-1}]_kk; raises IllConditionedGamma past ``max_condition``."""
    powers = _group_powers(gamma, powers)
    cond = gamma.condition()
    if not np.isfinite(cond) or cond > max_condition:
        raise IllConditionedGamma(cond)
    inv_kk = np.real(np.linalg.solve(gamma.matrix, np.eye(gamma.size)[:, k])[k])
    return float(M * powers[k] / inv_kk)


# ---------------------------------------------------------------------------
# condition diagnostics
# ---------------------------------------------------------------------------


@dataclass
class ConditionReport:
    """Per-M diagnostics of the asymptotic-scaling conditions, plus trend flags.

    Flags are heuristics over finite data, not proofs:

    * ``trace_nonvanishing``: min_k tr(C_k)/M at the largest M is at least
      half its value at the smallest M.
    * ``linearly_independent``: the Gram matrix Xi^H Xi / M has smallest
      eigenvalue above ``1e-8`` times its largest at every M.
    * ``gram_stable``: relative change of that smallest eigenvalue between
      the last two M is below 10 %.
    * ``norm_bounded``: max_k ||C_k||_2 grows by less than 10 % over the last
      doubling of M.
    """

    antennas: list
    trace_per_antenna: np.ndarray  # (n_M, K_p)
    gram_min_eig: np.ndarray
    max_spectral_norm: np.ndarray
    gamma_inv_norm: np.ndarray
    flags: dict

    @property
    def warnings(self):
        out = []
        if not self.flags["linearly_independent"]:
            out.append("linear-dependence: covariances of the pilot group are (numerically) linearly dependent")
        if not self.flags["trace_nonvanishing"]:
            out.append("vanishing-energy: captured energy per antenna is vanishing")
        return out


def gram_matrix(covs):
    """Xi^H Xi / M with Xi the vectorized covariances: [.]_{nk} = tr(C_n^H C_k)/M."""
    M = covs.shape[-1]
    g = np.einsum("nij,kij->nk", covs.conj(), covs) / M
    return 0.5 * (g + g.conj().T)


def condition_diagnostics(covs_by_M, gammas_by_M=None, dependence_tol=1e-8):
    """Trend report for ``covs_by_M``: {M: (K_p, M, M) covariances of one pilot group}."""
    antennas = sorted(covs_by_M)
    if len(antennas) < 2:
        raise ValueError("need at least two antenna counts")
    traces, gmin, gmax, norms, ginv = [], [], [], [], []
    for M in antennas:
        covs = np.asarray(covs_by_M[M])
        traces.append(np.real(np.einsum("kii->k", covs)) / M)
        eig = np.linalg.eigvalsh(gram_matrix(covs))
        gmin.append(max(eig[0], 0.0))
        gmax.append(eig[-1])
        norms.append(max(np.linalg.norm(c, 2) for c in covs))
        if gammas_by_M is not None and M in gammas_by_M:
            g = gammas_by_M[M].matrix if isinstance(gammas_by_M[M], GammaMatrix) else gammas_by_M[M]
            lam = np.linalg.eigvalsh(0.5 * (g + g.conj().T))[0]
            ginv.append(np.inf if lam <= 1e-15 * abs(np.trace(g)) else 1.0 / lam)
        else:
            ginv.append(np.nan)
    traces = np.array(traces)
    gmin, gmax, norms = np.array(gmin), np.array(gmax), np.array(norms)
    flags = {
        "trace_nonvanishing": bool(traces[-1].min() >= 0.5 * traces[0].min()),
        "linearly_independent": bool(np.all(gmin > dependence_tol * gmax)),
        "gram_stable": bool(gmin[-2] > 0 and abs(gmin[-1] - gmin[-2]) < 0.1 * gmin[-2]),
        "norm_bounded": bool(norms[-1] < 1.1 * norms[-2]),
    }
    return ConditionReport(antennas, traces, gmin, norms, np.array(ginv), flags)


# ---------------------------------------------------------------------------
# large-array limit for a uniform linear array
# ---------------------------------------------------------------------------


def _ula_limit_once(group_densities, all_densities, all_powers, rho_tr, n_nodes):
    breaks = set()
    for d in all_densities:
        breaks.update(d.breakpoints)
    theta, w = angular_quadrature(tuple(breaks), n_nodes)
    cos = np.cos(theta)
    # gain-scaled folded densities
    eta_all = np.array([d.gain * d.pdf(theta) for d in all_densities])
    eta_grp = np.array([d.gain * d.pdf(theta) for d in group_densities])
    # spectrum f = 2 eta / cos; the change of variable w = pi sin(theta) gives
    # (1/2) int eta_n eta_k cos / ((sum p eta + cos/2)(sum eta + cos/(2 rho))) dtheta
    alpha = cos / ((all_powers @ eta_all + 0.5 * cos) * (eta_grp.sum(axis=0) + 0.5 * cos / rho_tr))
    return 0.5 * (eta_grp * (w * alpha)) @ eta_grp.T


def gamma_ula_limit(group_densities, all_densities, all_powers, rho_tr, n_nodes=2048, rtol=1e-6, max_nodes=2**17):
    """M -> infinity limit of Gamma for a ULA, by quadrature with node doubling."""
    all_powers = np.asarray(all_powers, dtype=float)
    prev = _ula_limit_once(group_densities, all_densities, all_powers, rho_tr, n_nodes)
    while True:
        n_nodes *= 2
        cur = _ula_limit_once(group_densities, all_densities, all_powers, rho_tr, n_nodes)
        if np.max(np.abs(cur - prev)) <= rtol * np.max(np.abs(cur)):
            return GammaMatrix(tuple(range(len(group_densities))), cur, "circulant-limit")
        if n_nodes >= max_nodes:
            raise SinrError("Gamma limit quadrature did not converge")
        prev = cur


# ---------------------------------------------------------------------------
# conditional bound and the LMMSE filter
# ---------------------------------------------------------------------------


def conditional_sinr_from(g, h_hat, z_tilde, powers, k):
    """Instantaneous SINR of filter ``g`` for user ``k`` given estimates ``h_hat`` (M, K).

    ``z_tilde`` is I + sum_n p_n C~_n, or its diagonal when it is diagonal.

    p_k |g^H h_k|^2 / (g^H Z~ g + sum_{n != k} p_n |g^H h_n|^2),
    which equals the form with g^H g + p_k g^H C~_k g + sum_{n!=k} p_n g^H (C~_n + h_n h_n^H) g.
    """
    if not np.any(g):
        raise SinrError("zero filter")
    proj = np.abs(g.conj() @ h_hat) ** 2
    signal = powers[k] * proj[k]
    zg = z_tilde * g if z_tilde.ndim == 1 else z_tilde @ g
    den = np.real(np.vdot(g, zg)) + powers @ proj - powers[k] * proj[k]
    return float(signal / den)


def conditional_sinr(g, estimates, scenario, bs, k):
    """Conditional SINR of filter ``g`` (array or a bank) for user ``k`` at ``bs``."""
    if hasattr(g, "filter_for"):
        g = g.filter_for(k)
    h_hat = np.stack([e.h_hat for e in estimates], axis=1)
    z_tilde = error_received_covariance(scenario, estimates)
    return conditional_sinr_from(np.asarray(g), h_hat, z_tilde, scenario.powers, k)


def error_covariances(scenario, bs):
    """C~_k = C_k - C_k Q_k^{-1} C_k for every user at ``bs`` (K, M, M)."""
    out = np.empty_like(scenario.cov[bs])
    for g in scenario.groups():
        qf = HermitianFactor(observation_covariance(scenario, bs, g))
        for k in g:
            out[k] = error_covariance(scenario.cov[bs, k], qf)
    return out


def lmmse_gamma(scenario, bs, group, err_covs=None):
    """Gamma~_p = [tr(C_n Z~^{-1} C_k Q^{-1}) / M] with Z~ = I + sum_n p_n C~_n."""
    group = np.atleast_1d(group)
    p = scenario.powers
    if scenario.spectra is not None:
        spectra = scenario.spectra[bs]
        err = np.empty_like(spectra)
        for g in scenario.groups():
            q = spectra[g].sum(axis=0) + 1.0 / scenario.rho_tr
            err[g] = spectra[g] - spectra[g] ** 2 / q
        g = spectral_gamma(spectra, group, p, scenario.rho_tr, error_spectra=err)
        return GammaMatrix(tuple(int(k) for k in group), g, "lmmse")
    if err_covs is None:
        err_covs = error_covariances(scenario, bs)
    zt = np.eye(scenario.M) + np.einsum("k,kij->ij", p, err_covs)
    zf = HermitianFactor(zt)
    qf = HermitianFactor(observation_covariance(scenario, bs, group))
    weighted = weighted_covariances(scenario, bs, group, z_factor=zf, q_factor=qf)
    g = gamma_from_weighted(scenario.cov[bs, group], weighted)
    return GammaMatrix(tuple(int(k) for k in group), g, "lmmse")


def lmmse_deterministic_sinr(gamma_tilde, powers, M, k, asymptotic=False):
    """Deterministic equivalent of the LMMSE SINR (or its M p_k / [Gamma~^{-1}]_kk variant)."""
    if asymptotic:
        return asymptotic_sinr(gamma_tilde, powers, M, k)
    powers = _group_powers(gamma_tilde, powers)
    return reformulated_sinr(gamma_tilde.matrix, powers, M, k)


def low_snr_sinr(covs, lambdas):
    """Low-SNR limit with lambda_k = M p_k rho_tr held fixed.

    e^T L G (I + L G)^{-1} e / e^T (I + L G)^{-1} e per user, G = Xi^H Xi / M.
    ``covs`` is either (K_p, M, M) matrices or (K_p, M) eigenvalues in a
    shared basis.
    """
    covs = np.asarray(covs)
    lambdas = np.asarray(lambdas, dtype=float)
    if np.any(lambdas <= 0):
        raise SinrError("lambdas must be positive")
    lam = np.diag(lambdas)
    gram = covs @ covs.conj().T / covs.shape[-1] if covs.ndim == 2 else gram_matrix(covs)
    g = lam @ gram
    x = np.linalg.inv(np.eye(len(lambdas)) + g)
    num = np.real(np.diag(g @ x))
    den = np.real(np.diag(x))
    return num / den
