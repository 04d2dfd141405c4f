import numpy as np
import pytest

from lph import schedule as S


def degenerate_schedule(t_train=8):
    betas = np.zeros(t_train)
    alphas = 1.0 - betas
    return S.NoiseSchedule(t_train=t_train, betas=betas, alphas=alphas,
                           alpha_bars=np.cumprod(alphas))


class TestBuildLinearSchedule:
    def test_zero_beta_degenerate(self):
        sched = degenerate_schedule()
        np.testing.assert_allclose(sched.alpha_bars, 1.0)

    def test_direct_product_oracle(self):
        sched = S.build_linear_schedule(t_train=4, beta_min=0.1, beta_max=0.1)
        np.testing.assert_allclose(sched.alpha_bars, [0.9, 0.81, 0.729, 0.6561], atol=1e-12)

    def test_default_build_properties(self):
        sched = S.build_linear_schedule()
        assert np.all(np.diff(sched.alpha_bars) < 0)
        assert sched.alpha_bars[-1] < 0.05

    def test_recurrence_exact(self):
        sched = S.build_linear_schedule()
        recon = sched.alphas[1:] * sched.alpha_bars[:-1]
        assert np.max(np.abs(recon - sched.alpha_bars[1:])) < 1e-12

    def test_bounds_rejected(self):
        with pytest.raises(S.ScheduleError):
            S.build_linear_schedule(beta_min=0.5, beta_max=0.2)
        with pytest.raises(S.ScheduleError):
            S.build_linear_schedule(beta_max=1.0)
        with pytest.raises(S.ScheduleError):
            S.build_linear_schedule(t_train=1)


class TestLadder:
    def test_endpoints_and_monotonic(self):
        sched = S.build_linear_schedule()
        ladder = S.build_ladder(sched, 30)
        assert ladder.indices[0] == 199
        assert len(ladder.indices) == 30
        assert np.all(np.diff(ladder.indices) < 0)

    @pytest.mark.parametrize("t_train", [50, 100, 200])
    def test_short_schedules(self, t_train):
        sched = S.build_linear_schedule(t_train=t_train)
        ladder = S.build_ladder(sched, 30)
        assert ladder.indices[0] == t_train - 1
        assert ladder.indices[-1] == 0
        assert np.all(np.diff(ladder.indices) < 0)

    def test_timestep_after(self):
        sched = S.build_linear_schedule()
        ladder = S.build_ladder(sched, 30)
        assert ladder.timestep_after(0) == 199
        assert ladder.timestep_after(30) == -1


class TestForwardNoise:
    def test_abar_one_is_identity(self):
        sched = degenerate_schedule()
        z0 = np.random.default_rng(0).standard_normal((4, 8, 8))
        out = S.forward_noise(z0, 3, np.ones_like(z0), sched)
        np.testing.assert_allclose(out, z0)

    def test_zero_eps(self):
        sched = S.build_linear_schedule()
        z0 = np.ones((2, 2))
        out = S.forward_noise(z0, 100, np.zeros_like(z0), sched)
        np.testing.assert_allclose(out, np.sqrt(sched.alpha_bars[100]))

    def test_variance_preserving(self):
        sched = S.build_linear_schedule()
        rng = np.random.default_rng(1)
        z0 = rng.standard_normal(10_000)
        eps = rng.standard_normal(10_000)
        out = S.forward_noise(z0, 150, eps, sched)
        assert abs(np.var(out) - 1.0) < 0.05

    def test_t_out_of_range(self):
        sched = S.build_linear_schedule()
        with pytest.raises(S.ScheduleError):
            S.forward_noise(np.zeros(2), 500, np.zeros(2), sched)


class TestDdpmStep:
    def test_scalar_hand_computation(self):
        # alpha_t = 0.9, abar_t = 0.81 (so abar_{t-1} = 0.9), z = 1, eps = 0.5
        betas = np.array([0.1, 0.1])
        alphas = 1 - betas
        sched = S.NoiseSchedule(2, betas, alphas, np.cumprod(alphas))
        out = S.ddpm_step(np.array([1.0]), np.array([0.5]), t=1, noise=None,
                          schedule=sched, sigma_mode="zero")
        expect = (1.0 - (1 - 0.9) / np.sqrt(1 - 0.81) * 0.5) / np.sqrt(0.9)
        np.testing.assert_allclose(out, [expect], atol=1e-12)

    def test_sigma_zero_ignores_noise(self):
        sched = S.build_linear_schedule()
        rng = np.random.default_rng(2)
        z = rng.standard_normal((4, 4))
        eps = rng.standard_normal((4, 4))
        a = S.ddpm_step(z, eps, 100, rng.standard_normal((4, 4)), sched, sigma_mode="zero")
        b = S.ddpm_step(z, eps, 100, rng.standard_normal((4, 4)), sched, sigma_mode="zero")
        assert a.tobytes() == b.tobytes()

    def test_abar_one_guard(self):
        sched = degenerate_schedule()
        with pytest.raises(S.ScheduleError):
            S.ddpm_step(np.zeros(2), np.zeros(2), 3, None, sched, sigma_mode="zero")

    @pytest.mark.parametrize("t_train", [50, 100, 200])
    def test_exact_eps_roundtrip_full(self, t_train):
        """Deterministic steps with the analytically exact eps at every
        timestep recover z0."""
        sched = S.build_linear_schedule(t_train=t_train)
        rng = np.random.default_rng(3)
        z0 = rng.standard_normal((4, 16, 16))
        eps = rng.standard_normal((4, 16, 16))
        z = S.forward_noise(z0, t_train - 1, eps, sched)
        for t in range(t_train - 1, -1, -1):
            abar = sched.alpha_bar(t)
            exact = (z - np.sqrt(abar) * z0) / np.sqrt(1 - abar)
            z = S.ddpm_step(z, exact, t, None, sched, sigma_mode="zero")
        assert np.max(np.abs(z - z0)) < 1e-4

    def test_exact_eps_roundtrip_ladder(self):
        """Same inversion along a 30-step ladder via effective alphas."""
        sched = S.build_linear_schedule()
        ladder = S.build_ladder(sched, 30)
        rng = np.random.default_rng(4)
        z0 = rng.standard_normal((4, 8, 8))
        eps = rng.standard_normal((4, 8, 8))
        z = S.forward_noise(z0, int(ladder.indices[0]), eps, sched)
        for k in range(30):
            t, t_prev = ladder.step_pair(k)
            abar = sched.alpha_bar(t)
            exact = (z - np.sqrt(abar) * z0) / np.sqrt(1 - abar)
            z = S.ddpm_step(z, exact, t, None, sched, t_prev=t_prev, sigma_mode="zero")
        assert np.max(np.abs(z - z0)) < 1e-4


class TestSigma:
    def test_posterior_formula(self):
        sched = S.build_linear_schedule()
        t = 120
        abar_t = sched.alpha_bars[t]
        abar_prev = sched.alpha_bars[t - 1]
        beta = 1 - abar_t / abar_prev
        expect = np.sqrt((1 - abar_prev) / (1 - abar_t) * beta)
        assert abs(S.sigma_for(sched, t, t - 1, "posterior") - expect) < 1e-12

    def test_final_step_is_noiseless(self):
        sched = S.build_linear_schedule()
        assert S.sigma_for(sched, 5, -1, "posterior") == 0.0


class TestRenoise:
    def test_strength_identity_at_abar_one(self):
        sched = degenerate_schedule(8)
        ladder = S.SamplingLadder(4, np.array([7, 5, 3, 1]))
        z = np.random.default_rng(5).standard_normal((4, 4))
        out = S.renoise(z, 2, np.ones_like(z), "strength", sched, ladder)
        np.testing.assert_allclose(out, z)

    def test_strength_closed_form_moments(self):
        sched = S.build_linear_schedule()
        ladder = S.build_ladder(sched, 30)
        rng = np.random.default_rng(6)
        z = rng.standard_normal((4, 8, 8))
        tau = S.renoise_target(ladder, 18)
        draws = np.stack([S.renoise(z, 18, rng.standard_normal(z.shape), "strength",
                                    sched, ladder) for _ in range(4000)])
        abar = sched.alpha_bars[tau]
        assert np.max(np.abs(draws.mean(axis=0) - np.sqrt(abar) * z)) < 0.1
        assert abs(np.mean(np.var(draws, axis=0)) - (1 - abar)) < 0.05

    def test_incremental_equal_levels_is_identity(self):
        sched = S.build_linear_schedule()
        ladder = S.build_ladder(sched, 30)
        z = np.random.default_rng(7).standard_normal((4, 4))
        tau = S.renoise_target(ladder, 12)
        out = S.renoise(z, 12, np.ones_like(z), "incremental", sched, ladder, handover_t=tau)
        np.testing.assert_allclose(out, z, atol=1e-12)

    def test_incremental_rejects_denoising_direction(self):
        sched = S.build_linear_schedule()
        ladder = S.build_ladder(sched, 30)
        z = np.zeros((2, 2))
        with pytest.raises(S.ScheduleError):
            # handover at high noise, target at low noise: not allowed
            S.renoise(z, 2, np.zeros_like(z), "incremental", sched, ladder,
                      handover_t=int(ladder.indices[0]))

    def test_max_start_index_hits_top_of_ladder(self):
        sched = S.build_linear_schedule()
        ladder = S.build_ladder(sched, 30)
        assert S.renoise_target(ladder, 30) == ladder.indices[0]
