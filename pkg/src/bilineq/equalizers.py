"""Bilinear equalizers and the baseline receive filters.

A bilinear equalizer applies a statistics-only transformation ``A_k`` to the
pilot observation: ``g_k = A_k psi_k``. The optimal transformation (OBE)
maximizes the statistical SINR bound; :func:`obe_oracle_vectorized` solves
the M^2-dimensional problem directly and :func:`obe_transformations` uses
the per-pilot-group reformulation that never leaves M x M matrices.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .channel_model import dft_diagonal
from .statistics import (
    HermitianFactor,
    gamma_from_weighted,
    observation_covariance,
    spectral_gamma,
    weighted_covariances,
)

log = logging.getLogger(__name__)

METHODS = ("ls-mf", "mmse-mf", "obe", "obe-d", "lmmse", "mmse-zf")
BILINEAR_METHODS = ("ls-mf", "mmse-mf", "obe", "obe-d")

SINGULAR_REG = 1e-12


class EqualizerError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Transformation:
    """Dense ``matrix`` or a diagonal ``diag`` in the named eigenbasis.

    ``basis="dft"`` means ``A = F diag(a) F^H`` with the unitary DFT matrix.
    """

    user: int
    matrix: np.ndarray | None = None
    diag: np.ndarray | None = None
    basis: str = "identity"

    def __post_init__(self):
        if (self.matrix is None) == (self.diag is None):
            raise EqualizerError("exactly one of matrix / diag must be given")
        data = self.matrix if self.matrix is not None else self.diag
        if not np.any(data):
            raise EqualizerError("all-zero transformation")
        if self.basis not in ("identity", "dft"):
            raise EqualizerError(f"unknown basis {self.basis!r}")

    @property
    def is_diagonal(self):
        return self.diag is not None

    @property
    def M(self):
        return (self.matrix if self.matrix is not None else self.diag).shape[0]

    def dense(self):
        if self.matrix is not None:
            return self.matrix
        a = np.diag(self.diag.astype(complex))
        if self.basis == "dft":
            # F diag(a) F^H
            a = np.fft.ifft(a, axis=0, norm="ortho")
            a = np.fft.fft(a, axis=1, norm="ortho")
        return a

    def scaled(self, alpha):
        if self.matrix is not None:
            return Transformation(self.user, matrix=alpha * self.matrix, basis=self.basis)
        return Transformation(self.user, diag=alpha * self.diag, basis=self.basis)


@dataclass(frozen=True, eq=False)
class EqualizerBank:
    """Filters of one method for the users ``users``; column ``i`` of ``filters`` is ``g_{users[i]}``."""

    method: str
    users: tuple
    filters: np.ndarray
    transformations: tuple = field(default=())

    def filter_for(self, k):
        return self.filters[:, self.users.index(k)]


@dataclass
class OpCounter:
    """Counts complex multiplications performed by :func:`bilinear_filter`."""

    mults: int = 0


# ---------------------------------------------------------------------------
# optimal bilinear equalizer
# ---------------------------------------------------------------------------


def vec(a):
    return np.asarray(a).reshape(-1, order="F")


def unvec(a, M):
    return np.asarray(a).reshape(M, M, order="F")


def obe_oracle_vectorized(scenario, bs, k, max_antennas=16):
    """Optimal transformation by solving the M^2 x M^2 system directly.

    Returns ``(Transformation, gamma_star)`` with
    ``a* = (Q^T kron Z + sum_{n in I_k} p_n c_n c_n^H)^{-1} c_k`` and
    ``gamma* = p_k c_k^H a*``. Cost is O(M^6), hence the size guard.
    """
    M = scenario.M
    if M > max_antennas:
        raise EqualizerError(f"oracle limited to M <= {max_antennas} (got {M})")
    group = scenario.group_of(k)
    p = scenario.powers
    z = scenario.Z(bs)
    q = observation_covariance(scenario, bs, group)
    big = np.kron(q.T, z)
    for n in group:
        if n != k:
            c_n = vec(scenario.cov[bs, n])
            big = big + p[n] * np.outer(c_n, c_n.conj())
    c_k = vec(scenario.cov[bs, k])
    a = np.linalg.solve(big, c_k)
    gamma = float(np.real(p[k] * np.vdot(c_k, a)))
    return Transformation(k, matrix=unvec(a, M)), gamma


def combination_weights(gamma, powers, M):
    """Columns of (P^{-1} + M Gamma)^{-1} P^{-1}: the sigma coefficients of each user's OBE.

    Column ``k`` equals ``(P^{-1} + M Gamma)^{-1} e_k / p_k``.
    """
    a = np.diag(1.0 / powers) + M * gamma
    a = 0.5 * (a + a.conj().T)
    try:
        f = HermitianFactor(a)
    except np.linalg.LinAlgError:
        log.warning("P^-1 + M Gamma is not positive definite; regularizing with %.0e I", SINGULAR_REG)
        f = HermitianFactor(a + SINGULAR_REG * np.trace(a).real / len(a) * np.eye(len(a)))
    return f.solve(np.diag(1.0 / powers).astype(complex))


def obe_transformations(scenario, bs, group):
    """Scaled optimal transformations Z^{-1} (sum_l sigma_kl C_l) Q^{-1} for one pilot group.

    Cost is O(M^3 K_p). When the scenario covariances share an eigenbasis the
    transformations come out diagonal in that basis and cost O(M K_p^2).
    """
    group = np.atleast_1d(group)
    p = scenario.powers[group]
    if np.any(p <= 0):
        raise EqualizerError("OBE requires strictly positive powers")
    M = scenario.M
    if scenario.spectra is not None:
        spectra = scenario.spectra[bs]
        gamma = spectral_gamma(spectra, group, scenario.powers, scenario.rho_tr)
        sigma = combination_weights(gamma, p, M)
        z = 1.0 + scenario.powers @ spectra
        q = spectra[group].sum(axis=0) + 1.0 / scenario.rho_tr
        diags = (spectra[group].T / (z * q)[:, None]) @ sigma  # M x K_p
        diags = np.real_if_close(diags)
        return [Transformation(int(k), diag=diags[:, i], basis=scenario.basis) for i, k in enumerate(group)]
    weighted = weighted_covariances(scenario, bs, group)
    gamma = gamma_from_weighted(scenario.cov[bs, group], weighted)
    sigma = combination_weights(gamma, p, M)
    mats = np.einsum("lij,lk->kij", weighted, sigma)
    return [Transformation(int(k), matrix=mats[i]) for i, k in enumerate(group)]


def diagonal_obe(c_hat, powers, D=None, R=None, z_hat=None, q_hat=None, basis="dft", users=None):
    """Diagonal transformations a_k = D Xi (R + Xi^T D Xi)^{-1} e_k from covariance diagonals.

    ``c_hat`` is (M, K_p), one column per user of the pilot group. Defaults
    are ``D = diag(1 / (z_hat * q_hat))`` and ``R = P^{-1}``, which is the
    optimal design when the covariances really are diagonal in ``basis``.
    """
    xi = np.asarray(c_hat, dtype=float)
    if xi.ndim == 1:
        xi = xi[:, None]
    M, kp = xi.shape
    powers = np.broadcast_to(np.asarray(powers, dtype=float), (kp,))
    if D is None:
        if z_hat is None or q_hat is None:
            raise EqualizerError("default D needs z_hat and q_hat")
        D = 1.0 / (np.asarray(z_hat) * np.asarray(q_hat))
    D = np.asarray(D, dtype=float)
    if D.ndim == 2:
        D = np.diag(D).copy()
    if np.any(D <= 0):
        raise EqualizerError("D must have strictly positive entries")
    R = np.diag(1.0 / powers) if R is None else np.atleast_2d(np.asarray(R, dtype=float))
    R = 0.5 * (R + R.T)
    if np.linalg.eigvalsh(R)[0] <= 0:
        raise EqualizerError("R must be positive definite")
    core = R + xi.T @ (D[:, None] * xi)
    coef = np.linalg.solve(core, np.eye(kp))
    diags = D[:, None] * (xi @ coef)
    users = range(kp) if users is None else users
    return [Transformation(int(k), diag=diags[:, i], basis=basis) for i, k in enumerate(users)]


def diagonal_obe_for_group(scenario, bs, group, basis="dft"):
    """OBE-D: design from the diagonals of the covariances in ``basis``."""
    group = np.atleast_1d(group)
    c_hat = covariance_diagonals(scenario, bs, basis)
    p = scenario.powers
    z_hat = 1.0 + p @ c_hat
    q_hat = c_hat[group].sum(axis=0) + 1.0 / scenario.rho_tr
    return diagonal_obe(c_hat[group].T, p[group], z_hat=z_hat, q_hat=q_hat, basis=basis, users=group)


def covariance_diagonals(scenario, bs, basis="dft"):
    """(K, M) diagonals of every user's covariance at ``bs`` in ``basis``."""
    key = ("diag", bs, basis)
    cached = scenario._cache.get(key)
    if cached is None:
        if scenario.spectra is not None and scenario.basis == basis:
            cached = scenario.spectra[bs]
        elif basis == "dft":
            cached = dft_diagonal(scenario.cov[bs])
        else:
            cached = np.real(np.diagonal(scenario.cov[bs], axis1=-2, axis2=-1)).copy()
        scenario._cache[key] = cached
    return cached


# ---------------------------------------------------------------------------
# applying transformations
# ---------------------------------------------------------------------------


def bilinear_filter(t, psi, psi_basis="identity", counter=None):
    """g = A psi.

    Dense transformations cost O(M^2); diagonal ones an element-wise product,
    wrapped in an FFT pair when the transformation lives in the DFT basis and
    the observation is in the antenna domain.
    """
    psi = np.asarray(psi)
    if psi.shape[0] != t.M:
        raise EqualizerError(f"dimension mismatch: transformation {t.M}, observation {psi.shape[0]}")
    M = t.M
    if not t.is_diagonal:
        if psi_basis != "identity":
            raise EqualizerError("dense transformations act on antenna-domain observations")
        if counter is not None:
            counter.mults += M * M
        return t.matrix @ psi
    if psi_basis == t.basis:
        if counter is not None:
            counter.mults += M
        return t.diag * psi
    if t.basis == "dft" and psi_basis == "identity":
        if counter is not None:
            counter.mults += M + 2 * M * max(1, int(np.ceil(np.log2(M))))
        # F (a * F^H psi)
        return np.fft.ifft(t.diag * np.fft.fft(psi, norm="ortho"), norm="ortho")
    raise EqualizerError(f"basis mismatch: transformation in {t.basis!r}, observation in {psi_basis!r}")


# ---------------------------------------------------------------------------
# baseline filters
# ---------------------------------------------------------------------------


def mmse_mf_transformation(scenario, bs, k):
    """C_k Q^{-1}: the bilinear form of the MMSE-estimate matched filter."""
    q = observation_covariance(scenario, bs, scenario.group_of(k))
    return Transformation(k, matrix=HermitianFactor(q).solve_right(scenario.cov[bs, k]))


def baseline_matched_filters(scenario, bs, obs):
    """LS-MF (g = psi) and MMSE-MF (g = C Q^{-1} psi) banks for the users served by ``bs``."""
    served = tuple(int(k) for k in scenario.served(bs))
    ls = np.stack([obs.for_user(bs, k) for k in served], axis=1)
    mmse = np.stack([mmse_mf_transformation(scenario, bs, k).matrix @ obs.for_user(bs, k) for k in served], axis=1)
    return EqualizerBank("ls-mf", served, ls), EqualizerBank("mmse-mf", served, mmse)


def _stack_estimates(estimates):
    h_hat = np.stack([e.h_hat for e in estimates], axis=1)
    return h_hat


def error_received_covariance(scenario, estimates):
    """Z~ = I + sum_n p_n C~_n."""
    p = scenario.powers
    return np.eye(scenario.M) + sum(p[n] * e.err_cov for n, e in enumerate(estimates))


def lmmse_filter(estimates, scenario, bs):
    """(I + sum p_n C~_n + sum p_n h_n h_n^H)^{-1} h_k for the users served by ``bs``.

    ``estimates`` lists the ChannelEstimate of every user at ``bs``. One
    shared factorization serves all users.
    """
    if len(estimates) != scenario.n_users:
        raise EqualizerError("LMMSE needs estimates for all users at the base station")
    served = tuple(int(k) for k in scenario.served(bs))
    h_hat = _stack_estimates(estimates)
    zt = HermitianFactor(error_received_covariance(scenario, estimates))
    g = lmmse_from_estimates(h_hat, zt.solve, scenario.powers, served)
    return EqualizerBank("lmmse", served, g)


def lmmse_from_estimates(h_hat, zt_solve, powers, served):
    """Columns (Z~ + H P H^H)^{-1} h_k for k in ``served``, by the push-through identity.

    (Z~ + H P H^H)^{-1} H = Z~^{-1} H (I + P H^H Z~^{-1} H)^{-1}, so only K
    solves with the fixed Z~ are needed. ``zt_solve`` applies Z~^{-1}.
    """
    zh = zt_solve(h_hat)
    small = np.eye(h_hat.shape[1]) + powers[:, None] * (h_hat.conj().T @ zh)
    return zh @ np.linalg.solve(small, np.eye(h_hat.shape[1])[:, list(served)])


def mmse_zero_forcing(estimates, scenario, bs, max_condition=1e12):
    """G = H (H^H H)^{-1} over the serving cell's MMSE estimates."""
    served = tuple(int(k) for k in scenario.served(bs))
    if len(served) > scenario.M:
        raise EqualizerError("more served users than antennas")
    h = np.stack([estimates[k].h_hat for k in served], axis=1)
    gram = h.conj().T @ h
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > max_condition:
        raise EqualizerError(f"served estimates are rank deficient (condition number {cond:.3e})")
    return EqualizerBank("mmse-zf", served, h @ np.linalg.inv(gram))
