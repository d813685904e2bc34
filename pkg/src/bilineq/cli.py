"""Command line interface: ``bilineq run | check | asymptotic``.

Exit codes: 0 success, 1 a check or sweep failed, 2 usage or configuration
error. Every failure prints one line starting with ``bilineq: error:``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys

import numpy as np

from . import equalizers as eq
from . import sinr_analysis as sa
from .channel_model import sample_drop, scenario_from_drop, toeplitz_circulant_gap
from .config import ConfigError, parse_config
from .montecarlo import _DROP, SweepSpec, run_sweep, trial_rng, worker_count

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
PREFIX = "bilineq: error:"

ASYMPTOTIC_COLUMNS = (
    "M", "snr_db", "user", "bs", "pilot", "gamma_star", "gamma_asy", "ratio",
    "gamma_det", "gamma_limit_kk", "gamma_asy_limit", "cond_gamma", "flag",
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="bilineq", description="Bilinear equalizers for massive MIMO uplink.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    run = sub.add_parser("run", help="Monte-Carlo sweep, CSV of spectral efficiencies")
    run.add_argument("config")
    run.add_argument("--out", required=True)
    run.add_argument("--workers", type=int, default=None, help="worker processes (default: $BILINEQ_WORKERS or 1)")
    check = sub.add_parser("check", help="oracle equivalence, condition diagnostics, circulant gap")
    check.add_argument("config")
    asy = sub.add_parser("asymptotic", help="finite-M vs asymptotic SINRs, CSV")
    asy.add_argument("config")
    asy.add_argument("--out", required=True)
    return p


def _fmt(x):
    return format(float(x), ".17g")


def _sci(values):
    return "[" + ", ".join(f"{v:.3e}" for v in values) + "]"


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def cmd_run(cfg, out, workers=None, log_progress=False):
    progress = None
    if log_progress:
        def progress(point, M, snr):
            print(f"point {point}: M={M} snr_db={snr:g} done", file=sys.stderr)
    workers = worker_count() if workers is None else workers
    result = run_sweep(SweepSpec.from_config(cfg), cfg, workers=workers, progress=progress)
    result.write_csv(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# check
# ---------------------------------------------------------------------------


def _fixed_drop(cfg):
    return sample_drop(cfg, trial_rng(cfg.sim.seed, 0, 0, _DROP))


def check_oracle(cfg, drop):
    """Max relative difference between the M^2-dimensional oracle and the per-group OBE."""
    M = cfg.check.oracle_antennas
    sc = scenario_from_drop(cfg, drop, M, cfg.sim.snr_db[0])
    worst = 0.0
    for b in range(sc.n_bs):
        for g in sc.groups():
            gamma = sa.gamma_matrix(sc, b, g)
            ts = eq.obe_transformations(sc, b, g)
            for i, k in enumerate(g):
                _, g_oracle = eq.obe_oracle_vectorized(sc, b, int(k))
                g_closed = sa.obe_sinr_closed_form(gamma, sc.powers[g], M, i)
                g_eff = sa.bilinear_sinr(ts[i], sc, b, int(k))
                for v in (g_closed, g_eff):
                    worst = max(worst, abs(v - g_oracle) / abs(g_oracle))
    return worst


def _diagnostic_grid(cfg):
    grid = sorted(set(cfg.sim.antennas))
    return grid if len(grid) >= 2 else sorted(set(cfg.check.gap_antennas))


def check_conditions(cfg, drop, bs=0):
    """Condition report per pilot group at ``bs`` over the configured antenna grid."""
    grid = _diagnostic_grid(cfg)
    scenarios = {M: scenario_from_drop(cfg, drop, M, cfg.sim.snr_db[0]) for M in grid}
    reports = {}
    first = scenarios[grid[0]]
    for g in first.groups():
        covs = {M: sc.cov[bs, g] for M, sc in scenarios.items()}
        gammas = {M: sa.gamma_matrix(sc, bs, g) for M, sc in scenarios.items()}
        reports[int(first.users[g[0]].pilot)] = sa.condition_diagnostics(covs, gammas)
    return reports


def check_gap(cfg, drop, bs=0):
    """Toeplitz-circulant gap over ``check.gap_antennas`` for the users served by ``bs``."""
    grid = sorted(cfg.check.gap_antennas)
    served = [k for k, s in enumerate(drop.serving) if s == bs]
    gaps = np.array([[toeplitz_circulant_gap(drop.densities[bs, k], M, cfg.channel.quadrature_nodes) for M in grid] for k in served])
    return grid, gaps


def cmd_check(cfg, out=None):
    out = sys.stdout if out is None else out
    drop = _fixed_drop(cfg)
    failures = 0

    def line(status, name, detail):
        print(f"{status} {name}: {detail}", file=out)

    err = check_oracle(cfg, drop)
    ok = err <= cfg.check.oracle_tol
    failures += not ok
    line("PASS" if ok else "FAIL", "oracle-equivalence",
         f"M={cfg.check.oracle_antennas} max_rel_err={err:.3e} tol={cfg.check.oracle_tol:.1e}")

    for pilot, rep in check_conditions(cfg, drop).items():
        f = rep.flags
        line("INFO", f"conditions[pilot={pilot}]",
             f"M={rep.antennas} min_trace_per_M={_sci(rep.trace_per_antenna.min(axis=1))} "
             f"gram_min_eig={_sci(rep.gram_min_eig)} max_norm={_sci(rep.max_spectral_norm)} "
             f"gamma_inv_norm={_sci(rep.gamma_inv_norm)} flags={f}")
        for w in rep.warnings:
            line("WARN", f"conditions[pilot={pilot}]", w)

    grid, gaps = check_gap(cfg, drop)
    decreasing = bool(np.all(np.diff(gaps, axis=1) < 0))
    failures += not decreasing
    line("PASS" if decreasing else "FAIL", "circulant-gap",
         f"M={grid} mean_gap={_sci(gaps.mean(axis=0))} strictly_decreasing={decreasing}")
    return EXIT_OK if failures == 0 else EXIT_FAIL


# ---------------------------------------------------------------------------
# asymptotic
# ---------------------------------------------------------------------------


def asymptotic_rows(cfg):
    drop = _fixed_drop(cfg)
    rows = []
    limits = {}
    for M in cfg.sim.antennas:
        for snr in cfg.sim.snr_db:
            sc = scenario_from_drop(cfg, drop, M, snr)
            for b in range(sc.n_bs):
                for g in sc.groups():
                    gamma = sa.gamma_matrix(sc, b, g)
                    gamma_t = sa.lmmse_gamma(sc, b, g)
                    cond = gamma.condition()
                    key = (b, tuple(g), sc.rho_tr, sc.powers.tobytes())
                    if key not in limits:
                        limits[key] = _limit_or_none(drop, sc, b, g)
                    lim = limits[key]
                    for i, k in enumerate(g):
                        if sc.users[k].serving_bs != b:
                            continue
                        rows.append(_asymptotic_row(sc, M, snr, b, int(k), i, g, gamma, gamma_t, cond, lim))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    return rows


def _limit_or_none(drop, sc, b, g):
    try:
        dens = drop.densities[b]
        return sa.gamma_ula_limit([dens[k] for k in g], list(dens), sc.powers, sc.rho_tr)
    except sa.SinrError:
        return None


def _asymptotic_row(sc, M, snr, b, k, i, g, gamma, gamma_t, cond, lim):
    p = sc.powers[g]
    flag = "ok"
    g_star = sa.obe_sinr_closed_form(gamma, p, M, i)
    try:
        g_asy = sa.asymptotic_sinr(gamma, p, M, i)
    except sa.IllConditionedGamma:
        g_asy, flag = math.nan, "ill-conditioned"
    g_det = sa.lmmse_deterministic_sinr(gamma_t, p, M, i)
    if lim is None:
        lim_kk = lim_asy = math.nan
    else:
        lim_kk = float(np.real(lim.matrix[i, i]))
        try:
            lim_asy = sa.asymptotic_sinr(lim, p, M, i)
        except sa.IllConditionedGamma:
            lim_asy = math.nan
    ratio = g_star / g_asy if np.isfinite(g_asy) and g_asy > 0 else math.nan
    return (M, snr, k, b, int(sc.users[k].pilot), g_star, g_asy, ratio, g_det, lim_kk, lim_asy, cond, flag)


def cmd_asymptotic(cfg, out):
    rows = asymptotic_rows(cfg)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ASYMPTOTIC_COLUMNS)
        for r in rows:
            M, snr, k, b, pilot, *vals, flag = r
            w.writerow([str(M), _fmt(snr), str(k), str(b), str(pilot), *(_fmt(v) for v in vals), flag])
    return EXIT_OK


# ---------------------------------------------------------------------------


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required (run, check, asymptotic)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
        cfg = parse_config(args.config)
        if args.command == "run":
            return cmd_run(cfg, args.out, args.workers, args.verbose)
        if args.command == "check":
            return cmd_check(cfg)
        return cmd_asymptotic(cfg, args.out)
    except (UsageError, ConfigError, OSError) as exc:
        print(f"{PREFIX} {_one_line(exc)}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # any numerical failure is a failed command
        print(f"{PREFIX} {_one_line(exc)}", file=sys.stderr)
        return EXIT_FAIL


def _one_line(exc):
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
