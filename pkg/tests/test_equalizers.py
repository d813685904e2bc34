import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bilineq.channel_model import Scenario, circulant_from_spectrum
from bilineq.equalizers import (
    EqualizerError,
    OpCounter,
    Transformation,
    baseline_matched_filters,
    bilinear_filter,
    diagonal_obe,
    diagonal_obe_for_group,
    lmmse_filter,
    mmse_mf_transformation,
    mmse_zero_forcing,
    obe_oracle_vectorized,
    obe_transformations,
    vec,
)
from bilineq.sinr_analysis import bilinear_sinr, conditional_sinr
from bilineq.statistics import observation_covariance
from bilineq.training import ChannelEstimate, ls_observations, mmse_channel_estimate, sample_channels
from conftest import random_psd, random_scenario
from oracles import optimum_geig, optimum_search, statistical_sinr_traces


def group_inputs(sc, k, bs=0):
    group = sc.group_of(k)
    covs = sc.cov[bs, group]
    q = observation_covariance(sc, bs, group)
    return covs, sc.powers[group], list(group).index(k), sc.Z(bs), q


def collinearity_residual(a, b):
    a, b = vec(a), vec(b)
    alpha = np.vdot(b, a) / np.vdot(b, b)
    return np.linalg.norm(a - alpha * b) / np.linalg.norm(a)


def estimates_for(sc, rng, bs=0):
    ch = sample_channels(sc, rng)
    obs = ls_observations(ch, sc, rng)
    return obs, [mmse_channel_estimate(obs, sc, bs, k) for k in range(sc.n_users)]


class TestOracle:
    def test_white_single_user(self):
        sc = Scenario.synthetic(np.eye(4)[None], 1.0, None, 1.0)
        t, gamma = obe_oracle_vectorized(sc, 0, 0)
        np.testing.assert_allclose(t.matrix, np.eye(4) / 4, atol=1e-15)
        assert gamma == pytest.approx(1.0, rel=1e-14)

    def test_matches_generalized_eigenvalue(self, rng):
        sc = random_scenario(rng, 4, (3,), extra_users=2)
        for k in range(3):
            _, gamma = obe_oracle_vectorized(sc, 0, k)
            assert gamma == pytest.approx(optimum_geig(*group_inputs(sc, k)), rel=1e-10)

    def test_matches_numerical_search(self, rng):
        sc = random_scenario(rng, 4, (2,), extra_users=1)
        _, gamma = obe_oracle_vectorized(sc, 0, 0)
        best = optimum_search(*group_inputs(sc, 0))
        assert best == pytest.approx(gamma, rel=1e-4)
        assert best <= gamma * (1 + 1e-10)

    def test_sinr_of_oracle_transformation(self, rng):
        sc = random_scenario(rng, 4, (2,))
        t, gamma = obe_oracle_vectorized(sc, 0, 1)
        assert statistical_sinr_traces(t.matrix, *group_inputs(sc, 1)) == pytest.approx(gamma, rel=1e-10)

    def test_scale_invariant(self, rng):
        sc = random_scenario(rng, 4, (2,))
        t, _ = obe_oracle_vectorized(sc, 0, 0)
        a = statistical_sinr_traces(t.matrix, *group_inputs(sc, 0))
        b = statistical_sinr_traces(3.7j * t.matrix, *group_inputs(sc, 0))
        assert a == pytest.approx(b, rel=1e-12)

    def test_size_guard(self, rng):
        with pytest.raises(EqualizerError):
            obe_oracle_vectorized(random_scenario(rng, 17), 0, 0)


class TestObeTransformations:
    def test_collinear_with_oracle(self, rng):
        sc = random_scenario(rng, 4, (3, 2))
        for g in sc.groups():
            for t in obe_transformations(sc, 0, g):
                ref, _ = obe_oracle_vectorized(sc, 0, t.user)
                assert collinearity_residual(t.matrix, ref.matrix) < 1e-9

    def test_same_sinr_as_oracle(self, rng):
        sc = random_scenario(rng, 6, (3,), extra_users=2)
        for t in obe_transformations(sc, 0, sc.group_of(0)):
            _, gamma = obe_oracle_vectorized(sc, 0, t.user)
            assert bilinear_sinr(t, sc, 0, t.user) == pytest.approx(gamma, rel=1e-10)

    def test_single_user_structure(self, rng):
        sc = random_scenario(rng, 5, (1,), extra_users=2)
        (t,) = obe_transformations(sc, 0, [0])
        q = observation_covariance(sc, 0, [0])
        ref = np.linalg.solve(sc.Z(0), sc.cov[0, 0]) @ np.linalg.inv(q)
        assert collinearity_residual(t.matrix, ref) < 1e-10

    def test_white_interference_gives_mmse_mf(self, rng):
        # Z = cI when the only user has a white covariance
        c = 1.7 * np.eye(5)
        sc = Scenario.synthetic(c[None], 0.8, None, 1.2)
        (t,) = obe_transformations(sc, 0, [0])
        assert collinearity_residual(t.matrix, mmse_mf_transformation(sc, 0, 0).matrix) < 1e-12

    def test_rejects_zero_power(self, rng):
        sc = random_scenario(rng, 4, (2,))
        sc = Scenario.synthetic(sc.cov[0], [1.0, 0.0], None, 1.0)
        with pytest.raises(EqualizerError):
            obe_transformations(sc, 0, [0, 1])

    def test_beats_perturbations(self, rng):
        sc = random_scenario(rng, 6, (2,), extra_users=2)
        t = obe_transformations(sc, 0, [0, 1])[0]
        best = bilinear_sinr(t, sc, 0, 0)
        for _ in range(20):
            d = rng.standard_normal((6, 6)) + 1j * rng.standard_normal((6, 6))
            probe = t.matrix + 1e-2 * np.linalg.norm(t.matrix) * d / np.linalg.norm(d)
            assert bilinear_sinr(probe, sc, 0, 0) <= best * (1 + 1e-12)


def diagonal_scenario(rng, M, group_sizes=(2,), extra_users=1):
    sc = random_scenario(rng, M, group_sizes, extra_users=extra_users)
    spectra = rng.uniform(0.1, 2.0, (sc.n_users, M))
    return Scenario.synthetic(np.stack([np.diag(s) for s in spectra]), sc.powers,
                              [u.pilot for u in sc.users], sc.rho_tr)


class TestDiagonalObe:
    def test_all_ones(self):
        for r in (0.5, 2.0):
            (t,) = diagonal_obe(np.ones((7, 1)), 1.0, D=np.ones(7), R=[[r]])
            np.testing.assert_allclose(t.diag, 1 / (r + 7), rtol=1e-14)

    def test_matches_dense_obe_on_diagonal_covariances(self, rng):
        sc = diagonal_scenario(rng, 8)
        group = sc.group_of(0)
        for td, t in zip(diagonal_obe_for_group(sc, 0, group, basis="identity"), obe_transformations(sc, 0, group)):
            assert bilinear_sinr(td, sc, 0, td.user) == pytest.approx(bilinear_sinr(t, sc, 0, t.user), rel=1e-9)

    def test_matches_dense_obe_on_circulant_covariances(self, rng):
        M = 8
        spectra = rng.uniform(0.1, 2.0, (3, M))
        covs = np.stack([circulant_from_spectrum(s).matrix for s in spectra])
        sc = Scenario.synthetic(covs, [1.0, 0.7, 1.3], [0, 0, 1], 0.9)
        for td, t in zip(diagonal_obe_for_group(sc, 0, [0, 1]), obe_transformations(sc, 0, [0, 1])):
            assert collinearity_residual(td.dense(), t.matrix) < 1e-12

    @settings(max_examples=20, deadline=None)
    @given(st.floats(0.01, 100.0))
    def test_scaling_d_keeps_sinr(self, alpha):
        rng = np.random.default_rng(4)
        sc = diagonal_scenario(rng, 6, (1,), extra_users=2)
        c_hat = np.real(np.diag(sc.cov[0, 0]))[:, None]
        d = rng.uniform(0.5, 1.5, 6)
        (a,) = diagonal_obe(c_hat, sc.powers[0], D=d, basis="identity")
        (b,) = diagonal_obe(c_hat, sc.powers[0], D=alpha * d, basis="identity")
        assert bilinear_sinr(a, sc, 0, 0) == pytest.approx(bilinear_sinr(b, sc, 0, 0), rel=1e-9)

    @settings(max_examples=20, deadline=None)
    @given(st.floats(0.01, 100.0))
    def test_joint_scaling_of_d_and_r(self, alpha):
        # with several users the weights depend on R relative to D, so both must scale
        rng = np.random.default_rng(4)
        sc = diagonal_scenario(rng, 6)
        c_hat = np.real(np.stack([np.diag(sc.cov[0, k]) for k in (0, 1)], axis=1))
        d = rng.uniform(0.5, 1.5, 6)
        r = np.diag(1 / sc.powers[:2])
        a = diagonal_obe(c_hat, sc.powers[:2], D=d, R=r, basis="identity")
        b = diagonal_obe(c_hat, sc.powers[:2], D=alpha * d, R=alpha * r, basis="identity")
        np.testing.assert_allclose(b[0].diag, a[0].diag, rtol=1e-9)

    def test_invalid_inputs(self):
        with pytest.raises(EqualizerError):
            diagonal_obe(np.ones((3, 1)), 1.0, D=[1.0, 0.0, 1.0])
        with pytest.raises(EqualizerError):
            diagonal_obe(np.ones((3, 1)), 1.0, D=np.ones(3), R=[[-1.0]])
        with pytest.raises(EqualizerError):
            diagonal_obe(np.ones((3, 1)), 1.0)


class TestBilinearFilter:
    def test_identity(self, rng):
        psi = rng.standard_normal(5) + 1j * rng.standard_normal(5)
        np.testing.assert_array_equal(bilinear_filter(Transformation(0, matrix=np.eye(5)), psi), psi)

    def test_diagonal(self):
        g = bilinear_filter(Transformation(0, diag=np.full(4, 2.0)), np.eye(4)[0])
        np.testing.assert_array_equal(g, [2, 0, 0, 0])

    def test_dense_and_dft_paths_agree(self, rng):
        M = 16
        a = rng.standard_normal(M) + 1j * rng.standard_normal(M)
        t = Transformation(0, diag=a, basis="dft")
        psi = rng.standard_normal(M) + 1j * rng.standard_normal(M)
        dense = Transformation(0, matrix=t.dense())
        ref = bilinear_filter(dense, psi)
        np.testing.assert_allclose(bilinear_filter(t, psi), ref, rtol=1e-10, atol=1e-12 * np.abs(ref).max())

    def test_dft_diagonal_is_circulant(self, rng):
        a = rng.uniform(0, 1, 8)
        np.testing.assert_allclose(Transformation(0, diag=a, basis="dft").dense(),
                                   circulant_from_spectrum(a).matrix, atol=1e-14)

    def test_op_counts(self, rng):
        M = 64
        psi = np.ones(M, complex)
        counts = {}
        for name, t, basis in [
            ("dense", Transformation(0, matrix=np.eye(M)), "identity"),
            ("diag", Transformation(0, diag=np.ones(M), basis="dft"), "dft"),
        ]:
            c = OpCounter()
            bilinear_filter(t, psi, basis, counter=c)
            counts[name] = c.mults
        assert counts["dense"] == M * M
        assert counts["diag"] == M

    def test_errors(self):
        with pytest.raises(EqualizerError):
            bilinear_filter(Transformation(0, matrix=np.eye(3)), np.ones(4))
        with pytest.raises(EqualizerError):
            Transformation(0, diag=np.zeros(3))
        with pytest.raises(EqualizerError):
            Transformation(0)


class TestBaselines:
    def test_mmse_equals_ls_when_c_is_q(self, rng):
        # C = Q is the limit of noiseless training with a single user in the group
        c = random_psd(rng, 5)
        sc = Scenario.synthetic(c[None], 1.0, None, 1e15)
        obs, _ = estimates_for(sc, rng)
        ls, mm = baseline_matched_filters(sc, 0, obs)
        np.testing.assert_allclose(mm.filters, ls.filters, rtol=1e-9)

    def test_mmse_mf_is_mmse_estimate(self, rng):
        sc = random_scenario(rng, 6, (2, 1))
        obs, est = estimates_for(sc, rng)
        _, mm = baseline_matched_filters(sc, 0, obs)
        for k in mm.users:
            np.testing.assert_allclose(mm.filter_for(k), est[k].h_hat, rtol=1e-10)

    def test_mmse_mf_bound_under_full_contamination(self, rng):
        # every user shares the pilot; no sampled instance violated the ordering here
        for _ in range(20):
            sc = random_scenario(rng, 6, (3,))
            for k in range(sc.n_users):
                ls = bilinear_sinr(np.eye(6, dtype=complex), sc, 0, k)
                mm = bilinear_sinr(mmse_mf_transformation(sc, 0, k), sc, 0, k)
                assert mm >= ls * (1 - 1e-12)

    def test_mmse_mf_bound_can_fall_below_ls_mf(self):
        # the bound is not monotone under MMSE prefiltering in general
        rng = np.random.default_rng(0)
        sc = random_scenario(rng, 6, (1,))
        ls = bilinear_sinr(np.eye(6, dtype=complex), sc, 0, 0)
        mm = bilinear_sinr(mmse_mf_transformation(sc, 0, 0), sc, 0, 0)
        assert mm < ls


class TestLmmse:
    def test_perfect_single_user(self):
        e1 = np.eye(4)[0].astype(complex)
        sc = Scenario.synthetic(np.eye(4)[None], 1.0)
        bank = lmmse_filter([ChannelEstimate(e1, np.zeros((4, 4)))], sc, 0)
        g = bank.filter_for(0)
        assert np.linalg.norm(g[1:]) < 1e-15 * abs(g[0])

    def test_beats_random_filters(self, rng):
        sc = random_scenario(rng, 6, (2, 1), extra_users=1)
        _, est = estimates_for(sc, rng)
        bank = lmmse_filter(est, sc, 0)
        for k in bank.users:
            best = conditional_sinr(bank, est, sc, 0, k)
            for _ in range(50):
                g = rng.standard_normal(6) + 1j * rng.standard_normal(6)
                assert conditional_sinr(g, est, sc, 0, k) <= best * (1 + 1e-12)

    def test_equals_unscaled_maximizer(self, rng):
        sc = random_scenario(rng, 6, (2,), extra_users=2)
        _, est = estimates_for(sc, rng)
        bank = lmmse_filter(est, sc, 0)
        h = np.stack([e.h_hat for e in est], axis=1)
        zt = np.eye(6) + sum(p * e.err_cov for p, e in zip(sc.powers, est))
        for k in bank.users:
            others = [n for n in range(sc.n_users) if n != k]
            m = zt + (h[:, others] * sc.powers[others]) @ h[:, others].conj().T
            g_star = np.linalg.solve(m, h[:, k])
            assert conditional_sinr(g_star, est, sc, 0, k) == pytest.approx(
                conditional_sinr(bank, est, sc, 0, k), rel=1e-10)
            full = m + sc.powers[k] * np.outer(h[:, k], h[:, k].conj())
            np.testing.assert_allclose(bank.filter_for(k), np.linalg.solve(full, h[:, k]), rtol=1e-9)

    def test_needs_all_estimates(self, rng):
        sc = random_scenario(rng, 4, (2,))
        _, est = estimates_for(sc, rng)
        with pytest.raises(EqualizerError):
            lmmse_filter(est[:1], sc, 0)


class TestZeroForcing:
    def zf_scenario(self, M, K):
        return Scenario.synthetic(np.stack([np.eye(M)] * K), 1.0, np.arange(K), 1.0)

    def test_orthonormal(self):
        sc = self.zf_scenario(5, 3)
        est = [ChannelEstimate(np.eye(5)[k].astype(complex), np.zeros((5, 5))) for k in range(3)]
        bank = mmse_zero_forcing(est, sc, 0)
        np.testing.assert_allclose(bank.filters, np.eye(5)[:, :3], atol=1e-15)

    def test_defining_property(self, rng):
        sc = self.zf_scenario(8, 3)
        h = rng.standard_normal((8, 3)) + 1j * rng.standard_normal((8, 3))
        est = [ChannelEstimate(h[:, k], np.zeros((8, 8))) for k in range(3)]
        g = mmse_zero_forcing(est, sc, 0).filters
        np.testing.assert_allclose(g.conj().T @ h, np.eye(3), atol=1e-9)

    def test_normal_equations(self, rng):
        sc = self.zf_scenario(8, 2)
        h = rng.standard_normal((8, 2)) + 1j * rng.standard_normal((8, 2))
        est = [ChannelEstimate(h[:, k], np.zeros((8, 8))) for k in range(2)]
        g = mmse_zero_forcing(est, sc, 0).filters
        # g_k is the minimum-norm solution of h^H g = e_k: g = h x with (h^H h) x = e_k
        x, *_ = np.linalg.lstsq(h.conj().T @ h, np.eye(2), rcond=None)
        np.testing.assert_allclose(g, h @ x, rtol=1e-10)

    def test_rank_deficient(self):
        sc = self.zf_scenario(4, 2)
        e = np.eye(4)[0].astype(complex)
        est = [ChannelEstimate(e, np.zeros((4, 4))), ChannelEstimate(2 * e, np.zeros((4, 4)))]
        with pytest.raises(EqualizerError, match="rank"):
            mmse_zero_forcing(est, sc, 0)

    def test_too_many_users(self):
        sc = self.zf_scenario(2, 3)
        est = [ChannelEstimate(np.ones(2, complex), np.zeros((2, 2)))] * 3
        with pytest.raises(EqualizerError):
            mmse_zero_forcing(est, sc, 0)


def test_obe_not_below_baselines(rng):
    for _ in range(5):
        sc = random_scenario(rng, 6, (3,), extra_users=2)
        for t in obe_transformations(sc, 0, sc.group_of(0)):
            k = t.user
            obe = bilinear_sinr(t, sc, 0, k)
            assert obe >= bilinear_sinr(mmse_mf_transformation(sc, 0, k), sc, 0, k) * (1 - 1e-12)
            assert obe >= bilinear_sinr(np.eye(6, dtype=complex), sc, 0, k) * (1 - 1e-12)
