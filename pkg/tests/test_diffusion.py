"""Schedule tables, forward/reverse arithmetic, and the guided update rule.

Expected values were computed with an independent plain-loop oracle before
being frozen here; Monte Carlo checks use fixed seeds.
"""

import numpy as np
import pytest
import torch

from dynaguide.diffusion import (
    NoiseSchedule,
    forward_diffuse,
    guided_update,
    make_linear_schedule,
    predict_clean,
    renoise,
    reverse_step,
)
from dynaguide.errors import ConfigError, DegenerateGradientError, NumericsError

TOY = dict(T=50, beta_start=0.02, beta_end=0.30)


def toy_schedule() -> NoiseSchedule:
    return make_linear_schedule(**TOY)


class TestScheduleConstruction:
    def test_single_step_closed_form(self):
        s = make_linear_schedule(T=1, beta_start=0.1, beta_end=0.1)
        assert s.beta(1) == 0.1
        assert s.alpha_bar(1) == pytest.approx(0.9, abs=0)
        assert s.sigma(1) == pytest.approx(np.sqrt(0.1), rel=1e-15)

    def test_index_zero_is_clean_data(self):
        s = toy_schedule()
        assert s.beta(0) == 0.0
        assert s.alpha_bar(0) == 1.0
        assert s.sigma(0) == 0.0

    def test_classic_thousand_step_terminal(self):
        # independent product oracle gave 4.035829765375676e-05
        s = make_linear_schedule(T=1000, beta_start=1e-4, beta_end=0.02)
        assert s.alpha_bar(1000) == pytest.approx(4.035829765375676e-05, rel=1e-9)
        assert s.alpha_bar(1000) < 1e-4

    def test_toy_terminal_nearly_pure_noise(self):
        s = toy_schedule()
        assert s.alpha_bar(50) == pytest.approx(1.2835420867318107e-04, rel=1e-9)

    def test_variance_preserving_identity(self):
        s = make_linear_schedule(T=1000, beta_start=1e-4, beta_end=0.02)
        gap = np.abs(s.sigmas**2 + s.alpha_bars - 1.0)
        assert gap.max() <= 1e-12

    def test_monotonicity(self):
        s = toy_schedule()
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert np.all(np.diff(s.sigmas) > 0)

    @pytest.mark.parametrize(
        "kwargs,needle",
        [
            (dict(T=0, beta_start=0.1, beta_end=0.2), "T"),
            (dict(T=10, beta_start=0.0, beta_end=0.2), "beta_start"),
            (dict(T=10, beta_start=0.1, beta_end=1.0), "beta_end"),
            (dict(T=10, beta_start=0.3, beta_end=0.2), "beta_end"),
        ],
    )
    def test_invalid_config_names_offender(self, kwargs, needle):
        with pytest.raises(ConfigError, match=needle):
            make_linear_schedule(**kwargs)

    def test_step_index_out_of_range(self):
        s = toy_schedule()
        with pytest.raises(IndexError):
            s.beta(51)
        with pytest.raises(IndexError):
            s.alpha_bar(-1)


class TestForwardProcess:
    def test_marginal_moments_monte_carlo(self):
        s = toy_schedule()
        t = 25
        z0 = torch.full((100_000,), 1.7, dtype=torch.float64)
        g = torch.Generator().manual_seed(123)
        eps = torch.randn(z0.shape, generator=g, dtype=torch.float64)
        z_t = forward_diffuse(z0, t, eps, s)
        want_mean = np.sqrt(s.alpha_bar(t)) * 1.7
        want_var = s.sigma(t) ** 2
        assert float(z_t.mean()) == pytest.approx(want_mean, abs=0.01)
        assert float(z_t.var()) == pytest.approx(want_var, rel=0.05)

    def test_t_zero_returns_clean(self):
        s = toy_schedule()
        z0 = torch.randn(4, dtype=torch.float64)
        out = forward_diffuse(z0, 0, torch.zeros(4, dtype=torch.float64), s)
        assert torch.equal(out, z0)

    def test_shape_mismatch_rejected(self):
        s = toy_schedule()
        with pytest.raises(ValueError, match="shape"):
            forward_diffuse(torch.zeros(3), 5, torch.zeros(4), s)


class TestCleanPrediction:
    def test_round_trip_recovers_clean(self):
        s = toy_schedule()
        g = torch.Generator().manual_seed(9)
        z0 = torch.randn(3, 8, 8, generator=g, dtype=torch.float64)
        eps = torch.randn(3, 8, 8, generator=g, dtype=torch.float64)
        for t in (1, 17, 50):
            z_t = forward_diffuse(z0, t, eps, s)
            score = -eps / s.sigma(t)
            back = predict_clean(z_t, score, t, s)
            assert float((back - z0).abs().max()) < 1e-8

    def test_tiny_alpha_bar_raises(self):
        s = make_linear_schedule(T=2000, beta_start=0.02, beta_end=0.30)
        assert s.alpha_bar(2000) < 1e-12
        with pytest.raises(NumericsError, match="alpha_bar"):
            predict_clean(torch.zeros(2), torch.zeros(2), 2000, s)


class TestReverseStep:
    def test_final_step_is_deterministic(self):
        s = toy_schedule()
        z = torch.randn(5, dtype=torch.float64)
        score = torch.randn(5, dtype=torch.float64)
        a = reverse_step(z, score, 1, None, s)
        b = reverse_step(z, score, 1, torch.randn(5, dtype=torch.float64), s)
        assert torch.equal(a, b)

    def test_exact_score_chain_matches_data_moments(self):
        # Data z0 ~ N(1.5, 0.49).  With the analytic score of the diffused
        # marginal, the reverse chain from N(0, 1) must land within 10% of
        # the data moments.  Oracle run (seed 7, n=200k): mean 1.4634,
        # var 0.5029.
        s = toy_schedule()
        m0, v0 = 1.5, 0.49
        n = 200_000
        g = torch.Generator().manual_seed(7)
        z = torch.randn(n, generator=g, dtype=torch.float64)
        for t in range(s.T, 0, -1):
            a_bar = s.alpha_bar(t)
            var_t = a_bar * v0 + (1.0 - a_bar)
            score = -(z - np.sqrt(a_bar) * m0) / var_t
            noise = None
            if t > 1:
                noise = torch.randn(n, generator=g, dtype=torch.float64)
            z = reverse_step(z, score, t, noise, s)
        assert abs(float(z.mean()) - m0) / m0 < 0.10
        assert abs(float(z.var()) - v0) / v0 < 0.10


class TestGuidedUpdate:
    def test_gradient_scale_invariance(self):
        g = torch.Generator().manual_seed(3)
        mean = torch.randn(4, 4, generator=g, dtype=torch.float64)
        grad = torch.randn(4, 4, generator=g, dtype=torch.float64)
        gn = float(torch.linalg.vector_norm(grad))
        a = guided_update(mean, grad, eta=0.7, score_norm=2.3, grad_norm=gn)
        b = guided_update(mean, 3.7 * grad, eta=0.7, score_norm=2.3, grad_norm=gn)
        assert float((a - b).abs().max()) < 1e-12

    def test_step_magnitude(self):
        # spec'd point: eta=1, score_norm=4, ||g||=2 -> step of magnitude 2
        mean = torch.zeros(4, dtype=torch.float64)
        grad = torch.full((4,), 1.0, dtype=torch.float64)  # norm 2
        gn = float(torch.linalg.vector_norm(grad))
        assert gn == 2.0
        out = guided_update(mean, grad, eta=1.0, score_norm=4.0, grad_norm=gn)
        assert float(torch.linalg.vector_norm(out - mean)) == pytest.approx(2.0, rel=1e-12)
        # direction is -g/||g||
        assert torch.all(out < 0)

    def test_matches_unnormalized_form_when_norm_is_consistent(self):
        g = torch.Generator().manual_seed(11)
        mean = torch.randn(6, generator=g, dtype=torch.float64)
        grad = torch.randn(6, generator=g, dtype=torch.float64)
        gn = float(torch.linalg.vector_norm(grad))
        out = guided_update(mean, grad, eta=0.9, score_norm=3.1, grad_norm=gn)
        want = mean - 0.9 * (3.1 / gn**2) * grad
        assert float((out - want).abs().max()) < 1e-12

    def test_zero_eta_returns_mean(self):
        mean = torch.randn(3, dtype=torch.float64)
        out = guided_update(mean, torch.ones(3), eta=0.0, score_norm=5.0, grad_norm=1.0)
        assert torch.equal(out, mean)

    def test_degenerate_gradient_raises(self):
        with pytest.raises(DegenerateGradientError):
            guided_update(torch.zeros(3), torch.zeros(3), eta=1.0, score_norm=1.0, grad_norm=0.0)

    def test_negative_eta_rejected(self):
        with pytest.raises(ConfigError, match="eta"):
            guided_update(torch.zeros(3), torch.ones(3), eta=-0.1, score_norm=1.0, grad_norm=1.0)


class TestRenoise:
    def test_marginal_variance_identity(self):
        # (1 - beta_t) * sigma_{t-1}^2 + beta_t == sigma_t^2 exactly
        s = toy_schedule()
        for t in range(1, s.T + 1):
            lhs = (1.0 - s.beta(t)) * s.sigma(t - 1) ** 2 + s.beta(t)
            assert lhs == pytest.approx(s.sigma(t) ** 2, abs=1e-12)

    def test_marginal_preserved_monte_carlo(self):
        s = toy_schedule()
        t = 30
        z0 = 0.8
        n = 100_000
        g = torch.Generator().manual_seed(42)
        xi = torch.randn(n, generator=g, dtype=torch.float64)
        z_prev = np.sqrt(s.alpha_bar(t - 1)) * z0 + s.sigma(t - 1) * xi
        fresh = torch.randn(n, generator=g, dtype=torch.float64)
        z_t = renoise(z_prev, t, fresh, s)
        assert float(z_t.mean()) == pytest.approx(np.sqrt(s.alpha_bar(t)) * z0, abs=0.01)
        assert float(z_t.var()) == pytest.approx(s.sigma(t) ** 2, rel=0.05)
