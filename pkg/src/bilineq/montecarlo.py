"""Seeded Monte-Carlo sweeps of the conditional spectral efficiency.

Per (M, SNR) point the statistics-only quantities (MMSE weights, error
covariances, bilinear transformations) are computed once by
:func:`prepare_point`; every trial then draws channels and pilot noise,
forms the filters and evaluates the conditional SINR of each user at its
serving base station. Trial ``t`` of point ``i`` always uses the RNG stream
derived from ``(seed, i, t)``, so results do not depend on how trials are
distributed over worker processes.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import equalizers as eq
from .channel_model import power_normalization, sample_drop, scenario_from_drop
from .config import METRICS
from .sinr_analysis import conditional_sinr_from, error_covariances
from .statistics import HermitianFactor, observation_covariance
from .training import ls_observations, sample_channels

log = logging.getLogger(__name__)

WORKERS_ENV = "BILINEQ_WORKERS"
CSV_HEADER = ("method", "M", "snr_db", "metric", "user", "value", "stderr")

# purpose labels mixed into the per-trial seed sequence
_CHANNEL, _NOISE, _DROP = 0, 1, 2


class SweepError(RuntimeError):
    def __init__(self, M, snr_db, cause):
        super().__init__(f"sweep point M={M}, snr_db={snr_db:g} failed: {cause}")
        self.M = M
        self.snr_db = snr_db


@dataclass(frozen=True)
class SweepSpec:
    antennas: tuple
    snr_db: tuple
    trials: int
    seed: int = 0
    methods: tuple = eq.METHODS
    metrics: tuple = ("min-user-rate", "per-user-rate")
    drop_mode: str = "fixed"

    def __post_init__(self):
        if not self.antennas or not self.snr_db:
            raise ValueError("antenna and SNR grids must be nonempty")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        for m in self.methods:
            if m not in eq.METHODS:
                raise ValueError(f"unknown method {m!r}")
        for m in self.metrics:
            if m not in METRICS:
                raise ValueError(f"unknown metric {m!r}")

    @classmethod
    def from_config(cls, cfg):
        s = cfg.sim
        return cls(tuple(s.antennas), tuple(s.snr_db), s.trials, s.seed, tuple(s.methods), tuple(s.metrics), s.drop_mode)

    def points(self):
        """(point index, M, snr_db) in sweep order."""
        return [(i, M, snr) for i, (M, snr) in enumerate((M, s) for M in self.antennas for s in self.snr_db)]


@dataclass(frozen=True)
class ResultRow:
    method: str
    M: int
    snr_db: float
    metric: str
    user: object  # int user id, "min" or "mean"
    value: float
    stderr: float

    def cells(self):
        return (self.method, str(self.M), _fmt(self.snr_db), self.metric, str(self.user), _fmt(self.value), _fmt(self.stderr))


def _fmt(x):
    return format(float(x), ".17g")


@dataclass
class SweepResult:
    rows: list

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow(r.cells())
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    def select(self, method=None, M=None, snr_db=None, metric=None, user=None):
        out = []
        for r in self.rows:
            if method is not None and r.method != method:
                continue
            if M is not None and r.M != M:
                continue
            if snr_db is not None and r.snr_db != snr_db:
                continue
            if metric is not None and r.metric != metric:
                continue
            if user is not None and r.user != user:
                continue
            out.append(r)
        return out

    def value(self, method, M, snr_db, metric="min-user-rate", user="min"):
        (row,) = self.select(method, M, snr_db, metric, user)
        return row


def trial_rng(seed, point, trial, purpose):
    return np.random.default_rng(np.random.SeedSequence([seed, point, trial, purpose]))


# ---------------------------------------------------------------------------
# per-point statistics
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class PointStats:
    """Everything a trial needs that depends on statistics only.

    Vectors live in the scenario's working domain: the shared eigenbasis for
    circulant / diagonal covariances (all matrices are then diagonal), else
    the antenna domain.
    """

    domain: str
    psi_basis: str
    estimator: list  # per BS: (K, M, M) C_k Q^{-1}, or (K, M) diagonals
    z_tilde: list  # per BS: M x M matrix or (M,) diagonal
    z_solve: list  # per BS: callable applying Z~^{-1}
    transformations: dict  # (method, bs) -> {user: Transformation}


def _structured(scenario):
    return scenario.structure != "dense" and scenario.spectra is not None


def prepare_point(scenario, methods):
    """Statistics-only quantities for one scenario; computed once per sweep point."""
    structured = _structured(scenario)
    p = scenario.powers
    estimator, z_tilde, z_solve = [], [], []
    transformations = {}
    for b in range(scenario.n_bs):
        if structured:
            f = scenario.spectra[b]
            w = np.empty_like(f)
            err = np.empty_like(f)
            for g in scenario.groups():
                q = f[g].sum(axis=0) + 1.0 / scenario.rho_tr
                w[g] = f[g] / q
                err[g] = f[g] - f[g] ** 2 / q
            zt = 1.0 + p @ err
            estimator.append(w)
            z_tilde.append(zt)
            z_solve.append(_DiagSolve(zt))
        else:
            w = np.empty_like(scenario.cov[b])
            for g in scenario.groups():
                qf = HermitianFactor(observation_covariance(scenario, b, g))
                for k in g:
                    w[k] = qf.solve_right(scenario.cov[b, k])
            zt = np.eye(scenario.M) + np.einsum("k,kij->ij", p, error_covariances(scenario, b))
            estimator.append(w)
            z_tilde.append(zt)
            z_solve.append(HermitianFactor(zt).solve)
        served = set(int(k) for k in scenario.served(b))
        for g in scenario.groups():
            members = [int(k) for k in g if int(k) in served]
            if not members:
                continue
            if "obe" in methods:
                ts = eq.obe_transformations(scenario, b, g)
                transformations.setdefault(("obe", b), {}).update({t.user: t for t in ts if t.user in served})
            if "obe-d" in methods:
                basis = scenario.basis if structured else "dft"
                ts = eq.diagonal_obe_for_group(scenario, b, g, basis=basis)
                transformations.setdefault(("obe-d", b), {}).update({t.user: t for t in ts if t.user in served})
    domain = "eigen" if structured else "antenna"
    psi_basis = scenario.basis if structured else "identity"
    return PointStats(domain, psi_basis, estimator, z_tilde, z_solve, transformations)


class _DiagSolve:
    # picklable diagonal solve
    def __init__(self, d):
        self.d = d

    def __call__(self, b):
        return b / (self.d[:, None] if b.ndim == 2 else self.d)


def _estimate(stats, b, k, psi):
    w = stats.estimator[b][k]
    return w * psi if w.ndim == 1 else w @ psi


def run_trial(scenario, methods, trial_rng, stats=None, noise_rng=None):
    """Conditional SINRs of one channel/noise draw.

    ``trial_rng`` drives the channel draw and ``noise_rng`` (default: the
    same generator) the pilot noise. Returns {method: (K,) array} indexed by
    user, each user evaluated at its serving base station.
    """
    if stats is None:
        stats = prepare_point(scenario, methods)
    noise_rng = trial_rng if noise_rng is None else noise_rng
    channels = sample_channels(scenario, trial_rng, domain=stats.domain)
    obs = ls_observations(channels, scenario, noise_rng)
    p = scenario.powers
    K = scenario.n_users
    out = {m: np.empty(K) for m in methods}
    for b in range(scenario.n_bs):
        served = [int(k) for k in scenario.served(b)]
        if not served:
            continue
        h_hat = np.stack([_estimate(stats, b, k, obs.for_user(b, k)) for k in range(K)], axis=1)
        zt = stats.z_tilde[b]
        filters = {}
        for m in methods:
            if m == "ls-mf":
                filters[m] = {k: obs.for_user(b, k) for k in served}
            elif m == "mmse-mf":
                filters[m] = {k: h_hat[:, k] for k in served}
            elif m in ("obe", "obe-d"):
                ts = stats.transformations[m, b]
                filters[m] = {k: eq.bilinear_filter(ts[k], obs.for_user(b, k), stats.psi_basis) for k in served}
            elif m == "lmmse":
                g = eq.lmmse_from_estimates(h_hat, stats.z_solve[b], p, served)
                filters[m] = {k: g[:, i] for i, k in enumerate(served)}
            elif m == "mmse-zf":
                h = h_hat[:, served]
                g = h @ np.linalg.inv(h.conj().T @ h)
                filters[m] = {k: g[:, i] for i, k in enumerate(served)}
        for m in methods:
            for k in served:
                out[m][k] = conditional_sinr_from(filters[m][k], h_hat, zt, p, k)
    return out


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


def _run_chunk(payload):
    scenario, stats, methods, seed, point, trials = payload
    rates = {m: np.empty((len(trials), scenario.n_users)) for m in methods}
    for i, t in enumerate(trials):
        sinr = run_trial(scenario, methods, trial_rng(seed, point, t, _CHANNEL), stats, trial_rng(seed, point, t, _NOISE))
        for m in methods:
            rates[m][i] = np.log2(1.0 + sinr[m])
    return rates


def worker_count():
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    return max(1, n)


def _stderr(x, axis=0):
    n = x.shape[axis]
    if n < 2:
        return np.full(np.delete(x.shape, axis), np.nan)
    return x.std(axis=axis, ddof=1) / math.sqrt(n)


def aggregate(rates, method, M, snr_db, metrics):
    """Rows for one (method, point) from a (trials, K) array of per-trial rates."""
    mean = rates.mean(axis=0)
    err = _stderr(rates)
    rows = []
    if "per-user-rate" in metrics:
        rows += [ResultRow(method, M, snr_db, "per-user-rate", k, mean[k], err[k]) for k in range(len(mean))]
    if "min-user-rate" in metrics:
        worst = int(np.argmin(mean))
        rows.append(ResultRow(method, M, snr_db, "min-user-rate", "min", mean[worst], err[worst]))
    if "mean-rate" in metrics:
        per_trial = rates.mean(axis=1)
        rows.append(ResultRow(method, M, snr_db, "mean-rate", "mean", per_trial.mean(), float(_stderr(per_trial[:, None])[0])))
    return rows


def _row_key(r):
    user = (0, r.user, "") if isinstance(r.user, int) else (1, 0, r.user)
    return (r.method, r.M, r.snr_db, user, r.metric)


class _ScenarioCache:
    """Covariances depend on M only; SNR changes just rescale powers."""

    def __init__(self, cfg, spec):
        self.cfg = cfg
        self.spec = spec
        self._fixed = None
        self._by_m = {}

    def drop_for(self, point):
        if self.spec.drop_mode == "fixed":
            if self._fixed is None:
                self._fixed = sample_drop(self.cfg, trial_rng(self.spec.seed, 0, 0, _DROP))
            return self._fixed
        return sample_drop(self.cfg, trial_rng(self.spec.seed, point, 0, _DROP))

    def scenario(self, point, M, snr_db):
        drop = self.drop_for(point)
        if self.spec.drop_mode != "fixed":
            return scenario_from_drop(self.cfg, drop, M, snr_db)
        base = self._by_m.get(M)
        if base is None:
            base = self._by_m[M] = scenario_from_drop(self.cfg, drop, M, snr_db)
        power, rho_tr = power_normalization(self.cfg, snr_db, M)
        sc = base.with_powers(np.full(base.n_users, power), rho_tr)
        return dataclasses.replace(sc, rho_ul_db=snr_db, _cache={})


def run_sweep(spec, cfg, workers=None, progress=None):
    """Run every (M, SNR) point of ``spec`` and return the aggregated rows."""
    workers = worker_count() if workers is None else max(1, int(workers))
    methods = tuple(spec.methods)
    cache = _ScenarioCache(cfg, spec)
    rows = []
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for point, M, snr in spec.points():
            try:
                scenario = cache.scenario(point, M, snr)
                stats = prepare_point(scenario, methods)
                trials = np.arange(spec.trials)
                chunks = [c for c in np.array_split(trials, workers) if c.size]
                payloads = [(scenario, stats, methods, spec.seed, point, c) for c in chunks]
                parts = list(pool.map(_run_chunk, payloads)) if pool else [_run_chunk(pl) for pl in payloads]
            except Exception as exc:
                raise SweepError(M, snr, exc) from exc
            for m in methods:
                rates = np.concatenate([part[m] for part in parts], axis=0)
                if not np.all(np.isfinite(rates)):
                    raise SweepError(M, snr, f"non-finite rate for {m}")
                rows += aggregate(rates, m, M, snr, spec.metrics)
            if progress is not None:
                progress(point, M, snr)
    finally:
        if pool is not None:
            pool.shutdown()
    rows.sort(key=_row_key)
    return SweepResult(rows)
