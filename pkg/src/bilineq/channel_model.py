"""Angular power densities, ULA covariance matrices and multi-cell scenarios.

Covariances of a half-wavelength uniform linear array are generated from a
folded angular density on (-pi/2, pi/2). The dense (Toeplitz) construction
integrates steering-vector outer products numerically; the circulant
construction samples the density's spectrum on the DFT grid.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.special

HALF_PI = math.pi / 2


class DomainError(ValueError):
    pass


class CovarianceError(ValueError):
    pass


# ---------------------------------------------------------------------------
# angular densities
# ---------------------------------------------------------------------------


def _laplace_mass(center, spread):
    """Mass of a unit Laplacian inside (-pi/2, pi/2)."""
    return 1.0 - 0.5 * math.exp(-(HALF_PI - center) / spread) - 0.5 * math.exp(-(HALF_PI + center) / spread)


@dataclass(frozen=True)
class AngularDensity:
    """Folded angular power density with large-scale gain.

    ``shape`` selects the profile:

    * ``"laplace"``: mixture of Laplacians truncated to (-pi/2, pi/2) and
      renormalized; ``clusters`` holds ``(center, spread, weight)`` triples in
      radians.
    * ``"uniform"``: constant ``1/pi``.
    * ``"cosine"``: ``cos(theta)/2``, whose spectrum is flat, so the
      covariance is ``gain * I``.
    """

    clusters: tuple[tuple[float, float, float], ...] = ()
    gain: float = 1.0
    shape: str = "laplace"

    def __post_init__(self):
        if self.gain <= 0:
            raise ValueError("gain must be positive")
        if self.shape not in ("laplace", "uniform", "cosine"):
            raise ValueError(f"unknown density shape {self.shape!r}")
        if self.shape != "laplace":
            return
        if not self.clusters:
            raise ValueError("a Laplacian mixture needs at least one cluster")
        total = 0.0
        for center, spread, weight in self.clusters:
            if not -HALF_PI < center < HALF_PI:
                raise ValueError(f"cluster center {center} outside (-pi/2, pi/2)")
            if spread <= 0:
                raise ValueError("cluster spread must be positive")
            if weight < 0:
                raise ValueError("cluster weight must be nonnegative")
            total += weight
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"cluster weights sum to {total}, not 1")

    @classmethod
    def laplace(cls, centers, spreads, weights=None, gain=1.0):
        centers = np.atleast_1d(np.asarray(centers, dtype=float))
        spreads = np.broadcast_to(np.asarray(spreads, dtype=float), centers.shape)
        if weights is None:
            weights = np.full(centers.shape, 1.0 / centers.size)
        weights = np.asarray(weights, dtype=float)
        weights = weights / weights.sum()
        clusters = tuple((float(c), float(s), float(w)) for c, s, w in zip(centers, spreads, weights))
        return cls(clusters=clusters, gain=float(gain))

    @property
    def breakpoints(self):
        """Interior angles where the density has a kink."""
        if self.shape != "laplace":
            return ()
        return tuple(sorted({c for c, _, w in self.clusters if w > 0}))

    def pdf(self, theta):
        """Density without the gain; integrates to one over (-pi/2, pi/2)."""
        theta = np.asarray(theta, dtype=float)
        if np.any(np.abs(theta) >= HALF_PI):
            raise DomainError("angle outside the open interval (-pi/2, pi/2)")
        if self.shape == "uniform":
            return np.full(theta.shape, 1.0 / math.pi)
        if self.shape == "cosine":
            return 0.5 * np.cos(theta)
        out = np.zeros(theta.shape)
        for center, spread, weight in self.clusters:
            if weight == 0:
                continue
            lap = np.exp(-np.abs(theta - center) / spread) / (2.0 * spread)
            out += weight * lap / _laplace_mass(center, spread)
        return out

    def mirrored(self):
        """Density reflected about broadside (theta -> -theta)."""
        return AngularDensity(tuple((-c, s, w) for c, s, w in self.clusters), self.gain, self.shape)

    def spectrum(self, omega):
        """Spectrum f(w) = 2 pi beta eta(asin(w/pi)) / sqrt(pi^2 - w^2) on [-pi, pi]; 0 at |w| = pi."""
        omega = np.asarray(omega, dtype=float)
        out = np.zeros(omega.shape)
        inside = np.abs(omega) < math.pi
        w = omega[inside]
        theta = np.arcsin(w / math.pi)
        if self.shape == "cosine":
            out[inside] = self.gain  # closed form avoids 0/0 near the band edge
        else:
            out[inside] = 2 * math.pi * self.gain * self.pdf(theta) / np.sqrt(math.pi**2 - w**2)
        return out


def density_eval(d, theta):
    return d.pdf(theta)


@functools.lru_cache(maxsize=64)
def _gauss_legendre(n):
    return scipy.special.roots_legendre(n)


def angular_quadrature(breakpoints=(), n_nodes=2048):
    """Composite Gauss-Legendre rule on (-pi/2, pi/2) split at ``breakpoints``.

    Nodes are shared among panels in proportion to their length, at least 16
    per panel.
    """
    edges = sorted({-HALF_PI, HALF_PI, *(b for b in breakpoints if -HALF_PI < b < HALF_PI)})
    nodes, weights = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        n = max(16, int(round(n_nodes * (b - a) / math.pi)))
        x, w = _gauss_legendre(n)
        nodes.append(0.5 * (b - a) * x + 0.5 * (a + b))
        weights.append(0.5 * (b - a) * w)
    return np.concatenate(nodes), np.concatenate(weights)


# ---------------------------------------------------------------------------
# covariance matrices
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CovarianceModel:
    """Hermitian PSD covariance with its structure tag.

    ``structure`` is ``"dense"``, ``"circulant"`` (``matrix = F diag(spectrum) F^H``
    with the unitary DFT matrix ``F``) or ``"diagonal"`` (``matrix = diag(spectrum)``).
    """

    matrix: np.ndarray
    structure: str = "dense"
    spectrum: np.ndarray | None = None

    @property
    def basis(self):
        return {"dense": None, "circulant": "dft", "diagonal": "identity"}[self.structure]

    def check(self, herm_tol=1e-12):
        """Raise ``CovarianceError`` unless Hermitian and PSD within tolerance."""
        c = self.matrix
        m = c.shape[0]
        if np.max(np.abs(c - c.conj().T), initial=0.0) > herm_tol * max(1.0, np.max(np.abs(c), initial=0.0)):
            raise CovarianceError("matrix is not Hermitian")
        tr = float(np.real(np.trace(c)))
        lam = np.linalg.eigvalsh(c)[0]
        if lam < -1e-10 * max(tr, 0.0) / m:
            raise CovarianceError(f"matrix is not PSD (smallest eigenvalue {lam:.3e})")
        if self.structure == "circulant":
            ref = circulant_matrix(self.spectrum)
            if np.linalg.norm(ref - c) > 1e-10 * max(np.linalg.norm(c), 1e-300):
                raise CovarianceError("circulant matrix does not match its stored spectrum")
        return self


def steering_vector(M, theta):
    """ULA response with half-wavelength spacing: entry m is exp(j pi m sin theta)."""
    if M < 1:
        raise ValueError("M must be at least 1")
    theta = math.remainder(float(theta), 2 * math.pi)
    return np.exp(1j * math.pi * np.arange(M) * math.sin(theta))


def toeplitz_generator(d, M, quadrature_nodes=2048):
    """First column t[m] = beta * int exp(j pi m sin theta) eta(theta) dtheta, m = 0..M-1.

    This is the sign that makes C = beta * int a(theta) a(theta)^H eta(theta) dtheta.

    The rule is normalized by its own integral of the density, so t[0] equals
    ``gain`` exactly and the matrix is a nonnegative combination of
    steering-vector outer products.
    """
    if quadrature_nodes < 64:
        raise ValueError("quadrature_nodes must be at least 64")
    # oscillation exp(-j pi m sin theta) needs ~5 nodes per unit of m over (-pi/2, pi/2)
    n_nodes = max(quadrature_nodes, 8 * M)
    theta, w = angular_quadrature(d.breakpoints, n_nodes)
    weights = w * d.pdf(theta)
    keep = weights > 1e-18 * weights.max()
    weights, s = weights[keep], np.sin(theta[keep])
    weights /= weights.sum()
    t = np.empty(M, dtype=complex)
    for start in range(0, M, 256):
        m = np.arange(start, min(M, start + 256))
        t[m] = np.exp(1j * math.pi * np.outer(m, s)) @ weights
    return d.gain * t


def toeplitz_covariance(d, M, quadrature_nodes=2048, check_psd=True):
    t = toeplitz_generator(d, M, quadrature_nodes)
    c = scipy.linalg.toeplitz(t, t.conj())
    if check_psd and M > 1:
        lam, vec = np.linalg.eigh(c)
        if lam[0] < -1e-8 * d.gain:
            raise CovarianceError(
                f"Toeplitz covariance not PSD (smallest eigenvalue {lam[0]:.3e}); quadrature too coarse"
            )
        if lam[0] < 0:
            c = (vec * np.clip(lam, 0.0, None)) @ vec.conj().T
            c = 0.5 * (c + c.conj().T)
    return CovarianceModel(c, "dense")


def dft_frequencies(M):
    """Grid 2 pi m / M wrapped into (-pi, pi]."""
    omega = 2 * math.pi * np.arange(M) / M
    omega[omega > math.pi] -= 2 * math.pi
    return omega


def circulant_matrix(spectrum):
    """``F diag(spectrum) F^H`` with ``F[m, n] = exp(2j pi m n / M) / sqrt(M)``.

    ``F`` is numpy's orthonormal inverse FFT, so ``F x = ifft(x, norm="ortho")``
    and eigenvalue ``m`` belongs to frequency ``2 pi m / M``.
    """
    spectrum = np.asarray(spectrum)
    M = spectrum.size
    first_col = np.fft.ifft(spectrum)
    idx = (np.arange(M)[:, None] - np.arange(M)[None, :]) % M
    return first_col[idx]


def circulant_from_spectrum(spectrum):
    spectrum = np.asarray(spectrum, dtype=float)
    if np.any(spectrum < 0):
        raise ValueError("spectrum must be nonnegative")
    return CovarianceModel(circulant_matrix(spectrum), "circulant", spectrum)


def circulant_covariance(d, M):
    if M < 1:
        raise ValueError("M must be at least 1")
    return circulant_from_spectrum(d.spectrum(dft_frequencies(M)))


def diagonal_covariance(d, M):
    """Cell-free style surrogate: the circulant spectrum placed on the identity basis."""
    spectrum = d.spectrum(dft_frequencies(M))
    return CovarianceModel(np.diag(spectrum).astype(complex), "diagonal", spectrum)


def toeplitz_circulant_gap(d, M, quadrature_nodes=2048):
    """(1/sqrt M) * ||C_toeplitz - C_circulant||_F."""
    ct = toeplitz_covariance(d, M, quadrature_nodes, check_psd=False).matrix
    cc = circulant_covariance(d, M).matrix
    return float(np.linalg.norm(ct - cc) / math.sqrt(M))


def to_dft_basis(c):
    """``F^H C F``: the matrix expressed in the eigenbasis of circulant matrices."""
    x = np.fft.fft(c, axis=-2, norm="ortho")  # F^H C
    return np.fft.ifft(x, axis=-1, norm="ortho")  # (F^H C) F


def dft_diagonal(c):
    """Diagonal of ``F^H C F`` (real for Hermitian ``C``)."""
    return np.real(np.diagonal(to_dft_basis(c), axis1=-2, axis2=-1)).copy()


# ---------------------------------------------------------------------------
# network geometry and scenarios
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NetworkGeometry:
    """Hexagonal cells meeting at the origin, base stations at the far corners.

    Cell ``l`` is the hexagon centred at distance ``R = cell_diameter/2`` in
    direction ``2 pi l / cells``; its base station sits on the outer corner at
    distance ``2R`` and faces the origin.
    """

    cells: int = 3
    cell_diameter: float = 500.0
    user_disc_radius: float = 125.0
    pathloss_exponent: float = 3.7
    reference_distance: float = 50.0

    def __post_init__(self):
        if self.user_disc_radius <= 0:
            raise ValueError("user_disc_radius must be positive")

    @property
    def cell_directions(self):
        return 2 * math.pi * np.arange(self.cells) / self.cells

    @property
    def bs_positions(self):
        r = self.cell_diameter
        a = self.cell_directions
        return np.stack([r * np.cos(a), r * np.sin(a)], axis=1)

    @property
    def bs_boresights(self):
        return np.array([math.remainder(a + math.pi, 2 * math.pi) for a in self.cell_directions])

    def gain(self, distance):
        """Large-scale gain (max(d, d0)/d0)^(-exponent)."""
        d = np.maximum(np.asarray(distance, dtype=float), self.reference_distance)
        return (d / self.reference_distance) ** (-self.pathloss_exponent)

    def center_gain(self):
        return float(self.gain(self.cell_diameter))

    def bearing(self, bs, position):
        """Arrival angle at base station ``bs`` relative to its broadside."""
        delta = np.asarray(position) - self.bs_positions[bs]
        angle = math.atan2(delta[1], delta[0]) - self.bs_boresights[bs]
        return math.remainder(angle, 2 * math.pi)

    def distance(self, bs, position):
        return float(np.hypot(*(np.asarray(position) - self.bs_positions[bs])))

    def sample_user(self, cell, rng):
        """Uniform position in the part of the central disc that belongs to ``cell``."""
        r = self.user_disc_radius * math.sqrt(rng.uniform())
        width = 2 * math.pi / self.cells
        phi = self.cell_directions[cell] + (rng.uniform() - 0.5) * width
        return np.array([r * math.cos(phi), r * math.sin(phi)])


@dataclass(frozen=True)
class User:
    serving_bs: int
    position: np.ndarray | None
    power: float
    pilot: int


_MAX_CENTER = HALF_PI - 1e-3


@dataclass(eq=False)
class Scenario:
    """One network drop evaluated at ``M`` antennas per base station.

    ``cov[b, k]`` is the covariance of user ``k``'s channel to base station
    ``b``. Noise variance is one; ``rho_tr`` is the training SNR. When the
    covariances share a known eigenbasis, ``spectra[b, k]`` holds their
    eigenvalues and ``basis`` names it (``"dft"`` or ``"identity"``).
    """

    M: int
    users: list[User]
    cov: np.ndarray
    rho_tr: float
    rho_ul_db: float = 0.0
    structure: str = "dense"
    spectra: np.ndarray | None = None
    densities: dict | None = None
    geometry: NetworkGeometry | None = None
    config: object | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        n_bs, n_users, m1, m2 = self.cov.shape
        if n_users != len(self.users) or m1 != self.M or m2 != self.M:
            raise ValueError("covariance array does not match users and M")
        if self.rho_tr <= 0:
            raise ValueError("rho_tr must be positive")

    @classmethod
    def synthetic(cls, covs, powers, pilots=None, rho_tr=1.0, serving=None, structure="dense", spectra=None):
        """Single-base-station scenario from explicit covariances ``covs[k]``.

        By default all users share pilot 0 and are served by base station 0.
        """
        covs = np.asarray(covs, dtype=complex)
        if covs.ndim == 3:
            covs = covs[None]
        n_users = covs.shape[1]
        powers = np.broadcast_to(np.asarray(powers, dtype=float), (n_users,))
        pilots = np.zeros(n_users, int) if pilots is None else np.asarray(pilots, int)
        serving = np.zeros(n_users, int) if serving is None else np.asarray(serving, int)
        users = [User(int(s), None, float(p), int(q)) for s, p, q in zip(serving, powers, pilots)]
        if spectra is not None:
            spectra = np.asarray(spectra, dtype=float)
            if spectra.ndim == 2:
                spectra = spectra[None]
        return cls(covs.shape[-1], users, covs, float(rho_tr), structure=structure, spectra=spectra)

    @property
    def n_bs(self):
        return self.cov.shape[0]

    @property
    def n_users(self):
        return len(self.users)

    @property
    def powers(self):
        return np.array([u.power for u in self.users])

    @property
    def pilots(self):
        return np.array([u.pilot for u in self.users])

    @property
    def basis(self):
        return {"dense": None, "circulant": "dft", "diagonal": "identity"}[self.structure]

    def groups(self):
        """Users sharing each pilot, as index arrays in pilot order."""
        pilots = self.pilots
        return [np.flatnonzero(pilots == p) for p in np.unique(pilots)]

    def group_of(self, k):
        return np.flatnonzero(self.pilots == self.users[k].pilot)

    def served(self, bs):
        return np.array([k for k, u in enumerate(self.users) if u.serving_bs == bs], dtype=int)

    def covariance(self, bs, k):
        spectrum = None if self.spectra is None else self.spectra[bs, k]
        return CovarianceModel(self.cov[bs, k], self.structure, spectrum)

    def Z(self, bs):
        """Received-signal covariance I + sum_n p_n C_n at base station ``bs``."""
        return np.eye(self.M) + np.einsum("k,kij->ij", self.powers, self.cov[bs])

    def with_powers(self, powers, rho_tr=None):
        users = [User(u.serving_bs, u.position, float(p), u.pilot) for u, p in zip(self.users, powers)]
        return Scenario(
            self.M, users, self.cov, self.rho_tr if rho_tr is None else float(rho_tr),
            self.rho_ul_db, self.structure, self.spectra, self.densities, self.geometry, self.config,
        )

    def at_antennas(self, M):
        """Same drop with covariances regenerated for ``M`` antennas."""
        if self.densities is None or self.config is None:
            raise ValueError("scenario has no densities to regenerate from")
        return _assemble(self.config, self.geometry, self.users, self.densities, M, self.rho_tr, self.rho_ul_db)


def _covariance_for(mode, d, M, nodes):
    if mode == "toeplitz":
        return toeplitz_covariance(d, M, nodes)
    if mode == "circulant":
        return circulant_covariance(d, M)
    return diagonal_covariance(d, M)


def _assemble(cfg, geometry, users, densities, M, rho_tr, rho_ul_db):
    mode = cfg.channel.covariance_mode
    n_bs, n_users = geometry.cells, len(users)
    cov = np.empty((n_bs, n_users, M, M), dtype=complex)
    spectra = None if mode == "toeplitz" else np.empty((n_bs, n_users, M))
    for b in range(n_bs):
        for k in range(n_users):
            model = _covariance_for(mode, densities[b, k], M, cfg.channel.quadrature_nodes)
            cov[b, k] = model.matrix
            if spectra is not None:
                spectra[b, k] = model.spectrum
    structure = {"toeplitz": "dense", "circulant": "circulant", "diagonal": "diagonal"}[mode]
    return Scenario(M, users, cov, rho_tr, rho_ul_db, structure, spectra, densities, geometry, cfg)


def geometry_from_config(cfg):
    net = cfg.network
    return NetworkGeometry(
        cells=net.cells,
        cell_diameter=net.cell_diameter_m,
        user_disc_radius=net.disc_radius,
        pathloss_exponent=net.pathloss_exponent,
        reference_distance=net.reference_distance_m,
    )


def center_probe(cfg, M):
    """Covariance of a probe user at the exact network centre (as seen by any BS)."""
    geometry = geometry_from_config(cfg)
    beta = geometry.center_gain()
    if cfg.channel.angular_model == "flat":
        d = AngularDensity(gain=beta, shape="cosine")
    else:
        d = AngularDensity.laplace([0.0], math.radians(cfg.channel.angular_spread_deg), gain=beta)
    return _covariance_for(cfg.channel.covariance_mode, d, M, cfg.channel.quadrature_nodes)


def power_normalization(cfg, snr_db, M):
    """Common user power and training SNR for data SNR ``snr_db`` at the network centre.

    The power satisfies p * tr(C)/M = rho_ul for a probe at the origin. In
    ``equal-to-data`` mode the training SNR equals that power, so a centre
    user sees the same per-antenna SNR in training and data phases; in
    ``fixed(x)`` mode the centre user's training SNR is ``x`` dB.
    """
    probe = center_probe(cfg, M).matrix
    probe_gain = float(np.real(np.trace(probe))) / M
    power = 10 ** (snr_db / 10) / probe_gain
    fixed = cfg.sim.rho_tr_fixed_db
    rho_tr = power if fixed is None else 10 ** (fixed / 10) / probe_gain
    return power, rho_tr


@dataclass(frozen=True, eq=False)
class Drop:
    """Antenna-count independent part of a scenario: geometry, users, densities."""

    geometry: NetworkGeometry
    serving: tuple[int, ...]
    pilots: tuple[int, ...]
    positions: np.ndarray
    densities: np.ndarray  # object array [bs, user] of AngularDensity


def sample_drop(cfg, rng):
    """User positions, pilots and per-(BS, user) angular densities.

    User ``i`` of every cell gets pilot ``i`` (full pilot reuse). Each density
    is a Laplacian mixture whose dominant cluster points along the geometric
    bearing; the remaining cluster centres are offset uniformly at random.
    """
    geometry = geometry_from_config(cfg)
    ch = cfg.channel
    spread = math.radians(ch.angular_spread_deg)
    offset = math.radians(ch.cluster_offset_deg)
    serving, pilots, positions = [], [], []
    for cell in range(geometry.cells):
        for i in range(cfg.network.users_per_cell):
            positions.append(geometry.sample_user(cell, rng))
            serving.append(cell)
            pilots.append(i)
    densities = np.empty((geometry.cells, len(positions)), dtype=object)
    for b in range(geometry.cells):
        for k, pos in enumerate(positions):
            beta = float(geometry.gain(geometry.distance(b, pos)))
            if ch.angular_model == "flat":
                densities[b, k] = AngularDensity(gain=beta, shape="cosine")
                continue
            bearing = geometry.bearing(b, pos)
            offsets = np.concatenate([[0.0], rng.uniform(-offset, offset, ch.clusters - 1)])
            centers = np.clip(bearing + offsets, -_MAX_CENTER, _MAX_CENTER)
            weights = rng.uniform(0.5, 1.5, ch.clusters)
            weights[0] += 1.0
            densities[b, k] = AngularDensity.laplace(centers, spread, weights, gain=beta)
    if ch.duplicate_group is not None:
        members = [k for k, p in enumerate(pilots) if p == ch.duplicate_group]
        for b in range(geometry.cells):
            for k in members[1:]:
                densities[b, k] = densities[b, members[0]]
    return Drop(geometry, tuple(serving), tuple(pilots), np.array(positions), densities)


def scenario_from_drop(cfg, drop, M, snr_db):
    power, rho_tr = power_normalization(cfg, snr_db, M)
    users = [User(s, pos, power, p) for s, p, pos in zip(drop.serving, drop.pilots, drop.positions)]
    return _assemble(cfg, drop.geometry, users, drop.densities, M, rho_tr, snr_db)


def build_scenario(cfg, rng, M=None, snr_db=None):
    """Draw a drop and build its covariances.

    ``M`` and ``snr_db`` default to the first entries of the configured grids.
    Raises ``ConfigError`` when a cell has more users than pilots.
    """
    from .config import ConfigError

    if cfg.network.users_per_cell > cfg.network.n_pilots:
        raise ConfigError("network.users_per_cell", "exceeds the number of pilots")
    M = cfg.sim.antennas[0] if M is None else M
    snr_db = cfg.sim.snr_db[0] if snr_db is None else snr_db
    return scenario_from_drop(cfg, sample_drop(cfg, rng), M, snr_db)
