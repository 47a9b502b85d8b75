import math

import numpy as np
import pytest

import unravel.gaussian as G
from unravel.errors import (
    ConvergenceError,
    InvariantViolationError,
    StabilityError,
    StepSizeError,
)
from unravel.gaussian import (
    CovarianceState,
    DiskPoint,
    GaussianGenerators,
    QbmParams,
    gaussian_overlap,
    gaussian_purity,
    lyapunov_flow,
    lyapunov_steady,
    qbm_generators,
    riccati_flow,
    riccati_steady,
    solve_lyapunov,
    survival_curve,
)


def synthetic_stable_gen(eta=0.5):
    """A Hurwitz toy model for fixed-point tests (the particle drift is not Hurwitz).

    Diffusion is scaled so both the unconditional and the conditioned
    stationary covariances respect the Heisenberg cone.
    """
    return GaussianGenerators(
        drift=np.array([[-1.0, 0.3], [-0.2, -2.0]]),
        diffusion=np.array([[3.2, 0.4], [0.4, 4.8]]),
        meas_gain=np.diag([0.7, 0.4]),
        meas_offset=np.diag([0.1, 0.2]),
        dyne_matrix=np.array([[1.4, 0.2], [0.2, 0.6]]),
        eta=eta,
    )


class TestTypes:
    def test_disk_point_range(self):
        with pytest.raises(ValueError):
            DiskPoint(1.2, 0.0)
        assert DiskPoint(1.0, 2 * math.pi + 0.5).phi == pytest.approx(0.5)

    def test_covariance_invariants(self):
        with pytest.raises(InvariantViolationError):
            CovarianceState(1.0, 1.0, 1.0)  # det = 0 < 1/4
        with pytest.raises(InvariantViolationError):
            CovarianceState(-1.0, 1.0, 0.0)

    def test_temperature_positive(self):
        with pytest.raises(ValueError):
            QbmParams(0.0)


class TestGenerators:
    def test_eta_zero_correction_vanishes(self):
        gen = qbm_generators(QbmParams(1.0), DiskPoint(1.0, 0.7), eta=0.0)
        v = CovarianceState(1.0, 1.0, 0.3).matrix
        assert np.abs(gen.correction(v)).max() == 0.0

    def test_diffusion_independent_of_unravelling(self):
        params = QbmParams(2.0)
        ref = qbm_generators(params, DiskPoint(1.0, 0.0), 1.0)
        for u, eta in ((DiskPoint(0.0, 0.0), 0.5), (DiskPoint(0.6, 2.1), 0.1)):
            gen = qbm_generators(params, u, eta)
            assert np.array_equal(gen.diffusion, ref.diffusion)
            assert np.array_equal(gen.drift, ref.drift)

    def test_eta_out_of_range(self):
        with pytest.raises(ValueError):
            qbm_generators(QbmParams(1.0), DiskPoint(1.0, 0.0), 1.5)

    def test_qbm_drift_and_diffusion_values(self):
        t = 0.5
        gen = qbm_generators(QbmParams(t), DiskPoint(1.0, 0.0), 1.0)
        assert np.allclose(gen.drift, [[0.0, 1.0], [0.0, -1.0]])
        assert np.allclose(gen.diffusion, np.diag([1.0 / (8 * t), 2 * t]))


class TestLyapunov:
    def test_scalar_kernel(self):
        # a v + v a + d = 0  ->  v = -d / (2a)
        v = solve_lyapunov([[-2.0]], [[3.0]])
        assert v[0, 0] == pytest.approx(0.75)

    def test_zero_diffusion(self):
        v = solve_lyapunov([[-1.0, 0.2], [0.0, -3.0]], np.zeros((2, 2)))
        assert np.abs(v).max() < 1e-12

    def test_qbm_drift_not_hurwitz(self):
        # free damped particle: position variance never settles
        gen = qbm_generators(QbmParams(0.5), DiskPoint(1.0, 0.0), 0.0)
        with pytest.raises(StabilityError):
            lyapunov_steady(gen)

    def test_synthetic_fixed_point(self):
        gen = synthetic_stable_gen(eta=0.0)
        v = lyapunov_steady(gen)
        a, d = gen.drift, gen.diffusion
        resid = a @ v.matrix + v.matrix @ a.T + d
        assert np.abs(resid).max() < 1e-10


class TestRiccatiFlow:
    def test_zero_duration(self):
        gen = qbm_generators(QbmParams(1.0), DiskPoint(1.0, 0.0), 1.0)
        v0 = CovarianceState(1.0, 1.0, 0.0)
        times, states = riccati_flow(gen, v0, 0.0, 1e-3)
        assert list(times) == [0.0]
        assert states == [v0]

    def test_eta_zero_equals_lyapunov(self):
        params = QbmParams(1.0)
        gen0 = qbm_generators(params, DiskPoint(0.5, 1.1), 0.0)
        v0 = CovarianceState(1.5, 2.0, 0.4)
        _, cond = riccati_flow(gen0, v0, 3.0, 1e-3)
        _, unc = lyapunov_flow(gen0, v0, 3.0, 1e-3)
        diff = max(np.abs(a.matrix - b.matrix).max() for a, b in zip(cond, unc))
        assert diff < 1e-10

    def test_stationary_point_is_fixed(self):
        gen = synthetic_stable_gen(eta=0.0)
        v_ss = lyapunov_steady(gen)
        _, states = riccati_flow(gen, v_ss, 2.0, 1e-3)
        drift = max(np.abs(s.matrix - v_ss.matrix).max() for s in states)
        assert drift < 1e-9

    @pytest.mark.parametrize("temp,u", [
        (0.5, DiskPoint(1.0, 0.0)),
        (1.0, DiskPoint(0.0, 0.0)),
        (10.0, DiskPoint(0.7, 2.2)),
    ])
    def test_efficient_flow_preserves_purity(self, temp, u):
        # eta = 1 keeps pure states pure: strong check of the correction matrices
        gen = qbm_generators(QbmParams(temp), u, 1.0)
        v0 = CovarianceState(0.7, 0.25 / 0.7, 0.0)
        _, states = riccati_flow(gen, v0, 2.0, 1e-3)
        worst = max(abs(s.det() - 0.25) for s in states)
        assert worst < 1e-7

    def test_heisenberg_bound_along_flow(self):
        gen = qbm_generators(QbmParams(1.0), DiskPoint(1.0, 1.0), 0.8)
        _, states = riccati_flow(gen, CovarianceState(3.0, 3.0, 0.0), 5.0, 1e-3)
        assert min(s.det() for s in states) >= 0.25 - 1e-9

    def test_purity_approaches_stationary_value(self):
        gen = qbm_generators(QbmParams(1.0), DiskPoint(1.0, 0.0), 1.0)
        v_ss = riccati_steady(gen)
        _, states = riccati_flow(gen, CovarianceState(4.0, 4.0, 0.0), 12.0, 1e-3)
        purities = np.array([gaussian_purity(s) for s in states])
        assert purities[-1] == pytest.approx(gaussian_purity(v_ss), abs=1e-6)
        # monotone approach from the mixed side
        assert np.all(np.diff(purities) > -1e-9)

    def test_oversized_step_raises(self):
        gen = qbm_generators(QbmParams(100.0), DiskPoint(1.0, 0.0), 1.0)
        with pytest.raises(StepSizeError):
            riccati_flow(gen, CovarianceState(0.5, 0.5, 0.0), 2.0, 0.5)


class TestRiccatiSteady:
    def test_eta_zero_matches_lyapunov_on_stable_model(self):
        gen = synthetic_stable_gen(eta=0.0)
        assert np.abs(riccati_steady(gen).matrix - lyapunov_steady(gen).matrix).max() < 1e-9

    def test_algebraic_agrees_with_flow(self):
        for temp, u, eta in [(0.5, DiskPoint(1.0, 0.0), 1.0),
                             (1.0, DiskPoint(0.7, 2.5), 0.8),
                             (100.0, DiskPoint(1.0, 1.0), 0.4)]:
            gen = qbm_generators(QbmParams(temp), u, eta)
            va = G._riccati_stationary_algebraic(gen)
            vf = G._riccati_stationary_flow(gen)
            assert np.abs(va - vf).max() < 1e-8 * max(1.0, np.abs(va).max())

    def test_efficient_stationary_state_is_pure(self):
        for u in (DiskPoint(1.0, 0.0), DiskPoint(0.0, 0.0), DiskPoint(1.0, 2.0)):
            gen = qbm_generators(QbmParams(1.0), u, 1.0)
            assert gaussian_purity(riccati_steady(gen)) == pytest.approx(1.0, abs=1e-8)

    def test_conditioning_beats_no_conditioning(self):
        gen1 = qbm_generators(QbmParams(1.0), DiskPoint(1.0, 0.0), 1.0)
        gen_low = qbm_generators(QbmParams(1.0), DiskPoint(1.0, 0.0), 0.2)
        assert gaussian_purity(riccati_steady(gen1)) > gaussian_purity(riccati_steady(gen_low))

    def test_purity_monotone_in_eta(self):
        params = QbmParams(1.0)
        u = DiskPoint(1.0, 0.5)
        purities = [gaussian_purity(riccati_steady(qbm_generators(params, u, eta)))
                    for eta in np.linspace(0.1, 1.0, 10)]
        assert np.all(np.diff(purities) > 0)

    def test_momentum_only_homodyne_has_no_stationary_state(self):
        # phi = pi never reads position; the filter covariance runs away
        gen = qbm_generators(QbmParams(1.0), DiskPoint(1.0, math.pi), 1.0)
        with pytest.raises(ConvergenceError):
            riccati_steady(gen)

    def test_unconditional_qbm_has_no_stationary_state(self):
        gen = qbm_generators(QbmParams(1.0), DiskPoint(1.0, 0.0), 0.0)
        with pytest.raises(ConvergenceError):
            riccati_steady(gen)

    def test_regression_fixture(self):
        # frozen from the cross-validated algebraic/flow solutions
        v = riccati_steady(qbm_generators(QbmParams(1.0), DiskPoint(1.0, 0.0), 1.0))
        assert v.v_q == pytest.approx(0.4001212951, abs=1e-8)
        assert v.v_p == pytest.approx(0.7690872515, abs=1e-8)
        assert v.c_qp == pytest.approx(0.2402669081, abs=1e-8)

    def test_excess_noise_psd_on_stable_model(self):
        gen = synthetic_stable_gen(eta=1.0)
        gen0 = synthetic_stable_gen(eta=0.0)
        m = lyapunov_steady(gen0).matrix - riccati_steady(gen).matrix
        assert np.linalg.eigvalsh(m).min() > -1e-9


class TestPurityOverlap:
    def test_minimum_uncertainty(self):
        assert gaussian_purity(CovarianceState(0.5, 0.5, 0.0)) == pytest.approx(1.0)

    def test_double_width(self):
        assert gaussian_purity(CovarianceState(1.0, 1.0, 0.0)) == pytest.approx(0.5)

    def test_heisenberg_boundary_with_correlation(self):
        # V_q = V_p = 1, C = sqrt(3)/2 sits exactly on det V = 1/4
        v = CovarianceState(1.0, 1.0, math.sqrt(3.0) / 2.0)
        assert gaussian_purity(v) == pytest.approx(1.0)

    def test_overlap_identical_pure(self):
        v = CovarianceState(0.5, 0.5, 0.0)
        assert gaussian_overlap(v, (0, 0), v, (0, 0)) == pytest.approx(1.0)

    def test_overlap_distant_means(self):
        v = CovarianceState(0.5, 0.5, 0.0)
        assert gaussian_overlap(v, (0, 0), v, (12.0, 0)) < 1e-20

    def test_overlap_symmetry(self):
        v1 = CovarianceState(0.9, 0.5, 0.2)
        v2 = CovarianceState(0.6, 0.8, -0.1)
        a = gaussian_overlap(v1, (0.3, -0.4), v2, (-0.2, 0.5))
        b = gaussian_overlap(v2, (-0.2, 0.5), v1, (0.3, -0.4))
        assert abs(a - b) < 1e-12


class TestInformationFlow:
    def test_purification_curve_rises_from_zero(self):
        params = QbmParams(1.0)
        gen = qbm_generators(params, DiskPoint(1.0, 0.0), 1.0)
        t = np.linspace(0.0, 8.0, 200)
        p = G.conditioned_purity_curve(gen, t, G.qbm_information_start(params))
        assert p[0] == pytest.approx(0.0, abs=1e-12)
        assert np.all(np.diff(p) > -1e-9)
        assert p[-1] == pytest.approx(1.0, abs=1e-4)

    def test_momentum_only_never_purifies(self):
        params = QbmParams(1.0)
        gen = qbm_generators(params, DiskPoint(1.0, math.pi), 1.0)
        t = np.linspace(0.0, 10.0, 50)
        p = G.conditioned_purity_curve(gen, t, G.qbm_information_start(params))
        assert np.all(p < 1e-6)

    def test_matches_covariance_flow_from_finite_start(self):
        # same flow expressed in V and in Y coordinates
        params = QbmParams(0.5)
        gen = qbm_generators(params, DiskPoint(1.0, 0.0), 1.0)
        v0 = CovarianceState(2.0, 1.5, 0.3)
        t_grid = np.linspace(0.0, 2.0, 21)
        p_info = G.conditioned_purity_curve(gen, t_grid, np.linalg.inv(v0.matrix))
        _, states = riccati_flow(gen, v0, 2.0, 1e-3)
        for tg, pi in zip(t_grid, p_info):
            idx = int(round(tg / 1e-3))
            assert pi == pytest.approx(gaussian_purity(states[idx]), abs=1e-6)


class TestSurvivalCurve:
    def test_starts_at_unity(self):
        s = survival_curve(QbmParams(1.0), DiskPoint(1.0, 0.0), [0.0, 0.1])
        assert s[0] == pytest.approx(1.0, abs=1e-10)

    def test_monotone_decreasing_to_zero(self):
        taus = np.concatenate([[0.0], np.geomspace(1e-3, 50.0, 80)])
        s = survival_curve(QbmParams(1.0), DiskPoint(1.0, 0.0), taus)
        assert np.all(np.diff(s) < 1e-12)
        assert s[-1] < 0.1

    def test_projected_mean_noise_closed_form(self):
        # for the particle drift, N = lim A M A^T = (R_pp/2) [[1,-1],[-1,1]]
        gen = qbm_generators(QbmParams(1.0), DiskPoint(1.0, 0.0), 1.0)
        v_c = riccati_steady(gen)
        n = G.stationary_mean_noise(gen, v_c)
        r_pp = gen.mean_noise(v_c.matrix)[1, 1]
        expect = 0.5 * r_pp * np.array([[1.0, -1.0], [-1.0, 1.0]])
        assert np.abs(n - expect).max() < 1e-9

    def test_matches_monte_carlo_over_means(self):
        from scipy.linalg import expm

        params = QbmParams(1.0)
        u = DiskPoint(1.0, 0.0)
        gen = qbm_generators(params, u, 1.0)
        v_c = riccati_steady(gen)
        n_star = G.stationary_mean_noise(gen, v_c)
        taus = np.array([0.1, 0.5, 2.0])
        s_closed = survival_curve(params, u, taus)
        rng = np.random.default_rng(11)
        mu_p = rng.normal(0.0, math.sqrt(n_star[0, 0]), size=100_000)
        v_u = G.unconditional_covariance_curve(gen, v_c, taus)
        for i, tau in enumerate(taus):
            proj = np.eye(2) - expm(gen.drift * tau)
            deltas = np.stack([np.zeros_like(mu_p), mu_p], axis=1) @ proj.T
            sigma = v_c.matrix + v_u[i]
            si = np.linalg.inv(sigma)
            vals = np.exp(-0.5 * np.einsum("ni,ij,nj->n", deltas, si, deltas))
            vals /= math.sqrt(np.linalg.det(sigma))
            mc, se = vals.mean(), vals.std() / math.sqrt(len(vals))
            assert abs(s_closed[i] - mc) < 3.0 * se + 1e-9
