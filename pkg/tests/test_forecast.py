import math

import numpy as np
import pytest
from scipy import stats

from windsplice.datamodel import Station
from windsplice.distributions import GPQ, GammaQ, gamma_q_cdf, gamma_q_quantile, gp_q_cdf
from windsplice.forecast import (
    FitConfig,
    OffsiteWindowData,
    SimulationParams,
    SpacetimeWindowData,
    WindowSkipped,
    fit_stage1,
    fit_stage2,
    fit_stage3,
    fit_window,
    forecast_window,
    gamma_only_sample,
    offsite_window_data,
    simulate_dataset,
    spacetime_window_data,
    splice_sample,
)


def stations(n, region="East", spacing=35.0):
    return [Station(f"S{i}", spacing * i, 0.3 * i, region) for i in range(n)]


class TestSimulator:
    def test_truncated_splice_matches_pure_gamma_when_exponential_tail(self):
        # with xi=0 and the self-consistent continuation the spliced marginal
        # nearly coincides with the Gamma; KS against the exact Gamma CDF
        params = SimulationParams(
            mode="offsite", kappa=10.0, xi=0.0, rho1=0.8, tau1=1e8, tau2=1e8,
            truncated=True,
        )
        series, truth = simulate_dataset(params, stations(1), T=10_000, seed=3)
        y = series[0].speed
        psi = truth["psi"]["S0"][0]  # constant path (no latent variation)
        q = GammaQ(psi=float(psi), kappa=10.0, alpha=0.8)
        res = stats.kstest(y, lambda v: gamma_q_cdf(v, q))
        assert res.pvalue > 0.01

    def test_zero_latent_variance_gives_flat_eta(self):
        params = SimulationParams(mode="offsite", kappa=10.0, tau1=1e9, tau2=1e9, mu=1.5)
        series, truth = simulate_dataset(params, stations(1), T=4000, seed=4)
        eta = truth["eta"]["S0"]
        assert np.max(np.abs(eta - 1.5)) < 2e-3
        # sample mean of speeds matches the Gamma mean within 3 sigma
        q = GammaQ(psi=math.exp(1.5), kappa=10.0, alpha=0.8)
        mean_gamma = 10.0 / q.rate
        y = series[0].speed
        se = y.std() / math.sqrt(y.size)
        # the GP continuation shifts the far tail a little; stay within MC error
        assert abs(y.mean() - mean_gamma) < 3 * se + 0.02 * mean_gamma

    def test_spacetime_lag1_autocorrelation(self):
        params = SimulationParams(mode="spacetime", rho2=0.9, sigma2=0.3, range_km=80.0,
                                  tau2=1e9)
        series, truth = simulate_dataset(params, stations(3), T=5000, seed=5)
        u = truth["u"]
        for k in range(3):
            x = u[k]
            ac = np.corrcoef(x[:-1], x[1:])[0, 1]
            assert abs(ac - 0.9) < 0.03

    def test_exceedance_count_binomial_band(self):
        params = SimulationParams(mode="offsite", kappa=8.0, alpha=0.8, tau1=50.0, tau2=200.0)
        series, truth = simulate_dataset(params, stations(1), T=1000, seed=6)
        y = series[0].speed
        psi = truth["psi"]["S0"]
        count = int(np.sum(y > psi))
        se = math.sqrt(1000 * 0.2 * 0.8)
        assert abs(count - 200) < 3 * se

    def test_zero_prob_and_missing(self):
        params = SimulationParams(mode="offsite", zero_prob=0.1, missing_prob=0.05)
        series, _ = simulate_dataset(params, stations(1), T=2000, seed=7)
        y = series[0].speed
        assert np.mean(y[np.isfinite(y)] == 0) == pytest.approx(0.1, abs=0.03)
        assert np.mean(~np.isfinite(y)) == pytest.approx(0.05, abs=0.02)

    def test_t_zero_gives_empty_series(self):
        series, _ = simulate_dataset(SimulationParams(), stations(2), T=0, seed=0)
        assert all(len(s) == 0 for s in series)

    def test_dependency_cycle_rejected(self):
        params = SimulationParams(
            neighbor_coefs=(("S0", (("S1", 0.1),)), ("S1", (("S0", 0.1),)))
        )
        with pytest.raises(ValueError, match="cycle"):
            simulate_dataset(params, stations(2), T=10, seed=0)

    def test_deterministic_under_seed(self):
        params = SimulationParams(mode="offsite")
        s1, _ = simulate_dataset(params, stations(2), T=200, seed=9)
        s2, _ = simulate_dataset(params, stations(2), T=200, seed=9)
        for a, b in zip(s1, s2):
            assert np.array_equal(a.speed, b.speed, equal_nan=True)
            assert np.array_equal(a.direction, b.direction, equal_nan=True)


class TestSpliceSampler:
    def test_p_zero_all_gamma(self):
        rng1 = np.random.default_rng(1)
        draws, flags = splice_sample(500, rng1, psi=3.0, kappa=10.0, alpha=0.8, p=0.0, gp=None)
        rng2 = np.random.default_rng(1)
        u_ind = rng2.uniform(size=500)
        u_val = rng2.uniform(size=500)
        q = GammaQ(psi=3.0, kappa=10.0, alpha=0.8)
        expected = gamma_q_quantile(np.clip(u_val, 1e-15, 1 - 1e-15), q)
        assert np.allclose(draws, expected)

    def test_p_one_all_at_or_above_threshold(self):
        rng = np.random.default_rng(2)
        gp = GPQ(phi=0.5, xi=0.1, beta=0.5)
        draws, _ = splice_sample(2000, rng, psi=3.0, kappa=10.0, alpha=0.8, p=1.0, gp=gp)
        assert np.all(draws >= 3.0)

    def test_truncated_mode_cdf_value_at_threshold(self):
        rng = np.random.default_rng(3)
        p = 0.3
        gp = GPQ(phi=0.5, xi=0.1, beta=0.5)
        draws, _ = splice_sample(
            100_000, rng, psi=3.0, kappa=10.0, alpha=0.8, p=p, gp=gp, truncated=True
        )
        frac_below = np.mean(draws < 3.0)
        se = math.sqrt(p * (1 - p) / draws.size)
        assert abs(frac_below - (1 - p)) < 3 * se

    def test_plain_mode_splice_consistency(self):
        # P(draw > psi) = p + (1-p)(1-alpha) when the bulk stays untruncated
        rng = np.random.default_rng(4)
        p, alpha = 0.25, 0.8
        gp = GPQ(phi=0.5, xi=0.0, beta=0.5)
        draws, _ = splice_sample(
            200_000, rng, psi=3.0, kappa=10.0, alpha=alpha, p=p, gp=gp, truncated=False
        )
        target = p + (1 - p) * (1 - alpha)
        se = math.sqrt(target * (1 - target) / draws.size)
        assert abs(np.mean(draws > 3.0) - target) < 3 * se

    def test_gamma_tail_fallback_without_gp(self):
        rng = np.random.default_rng(5)
        draws, flags = splice_sample(
            50_000, rng, psi=3.0, kappa=10.0, alpha=0.8, p=0.2, gp=None
        )
        assert not flags["gp"]
        # exceedance draws fall back to the Gamma's own conditional tail
        assert np.mean(draws > 3.0) == pytest.approx(0.2 + 0.8 * 0.2, abs=0.01)

    def test_determinism(self):
        gp = GPQ(phi=0.5, xi=0.1, beta=0.5)
        a, _ = splice_sample(1000, np.random.default_rng(7), 3.0, 10.0, 0.8, 0.3, gp)
        b, _ = splice_sample(1000, np.random.default_rng(7), 3.0, 10.0, 0.8, 0.3, gp)
        assert np.array_equal(a, b)


def small_window(T=260, seed=10, neighbor=False):
    n_st = 2 if neighbor else 1
    params = SimulationParams(
        mode="offsite", kappa=10.0, xi=0.1, rho1=0.7, tau1=40.0, tau2=200.0,
        neighbor_coefs=(("S1", (("S0", 0.05),)),) if neighbor else (),
    )
    series, truth = simulate_dataset(params, stations(n_st), T=T, seed=seed)
    smap = {s.station_id: s for s in series}
    sid = "S1" if neighbor else "S0"
    nbrs = ["S0"] if neighbor else []
    data = offsite_window_data(smap, sid, nbrs, 0, T - 4, 1)
    return data, truth


class TestStageFits:
    def test_stage1_needs_enough_positives(self):
        data, _ = small_window(T=260)
        starved = OffsiteWindowData(
            station_id=data.station_id,
            origin=40,
            horizon=1,
            y=data.y[:41],
            hours=data.hours[:41],
            neighbor_ids=data.neighbor_ids,
            z=data.z[:41],
            z_target=data.z_target,
            target_hour=data.target_hour,
        )
        with pytest.raises(WindowSkipped):
            fit_stage1(starved, FitConfig())

    def test_stage2_degenerate_returns_none(self):
        data, _ = small_window()
        cfg = FitConfig()
        psi_huge = np.full(data.n_train, 1e9)
        assert fit_stage2(data, psi_huge, cfg) is None

    def test_stage3_skipped_below_min_exceedances(self):
        data, _ = small_window()
        cfg = FitConfig()
        psi_huge = np.full(data.n_train, 1e9)
        assert fit_stage3(data, psi_huge, cfg) is None

    def test_target_reconstruction_identity(self):
        data, _ = small_window(neighbor=True)
        cfg = FitConfig()
        fit = fit_stage1(data, cfg)
        # eta at the target is exactly mu + beta'z(target) + rho^h f1(end) + f2(hour)
        # which forecast_window exponentiates into the threshold
        rng = np.random.default_rng(0)
        samples = forecast_window(data, cfg, rng, fits=fit_window(data, cfg))
        assert samples[0].psi_hat == pytest.approx(float(np.exp(fit.eta_target)), rel=1e-6)

    def test_forecast_window_fallback_flags(self):
        data, _ = small_window()
        cfg = FitConfig(n_min_exceed=10_000)  # force the GP stage to skip
        rng = np.random.default_rng(1)
        samples = forecast_window(data, cfg, rng)
        ps = samples[0]
        assert ps.flags["stage3_fitted"] is False
        assert ps.phi_hat is None and ps.xi_hat is None
        assert ps.draws.size == cfg.m_draws
        assert np.all(ps.draws >= 0)

    def test_baseline_skips_stages(self):
        data, _ = small_window()
        cfg = FitConfig(m_draws=200)
        samples = forecast_window(data, cfg, np.random.default_rng(2), baseline=True)
        ps = samples[0]
        assert ps.flags["baseline"] and ps.p_hat == 0.0
        assert ps.flags["stage2_fitted"] is False

    def test_identical_seed_bit_identical(self):
        data, _ = small_window()
        cfg = FitConfig(m_draws=500)
        fits = fit_window(data, cfg)
        a = forecast_window(data, cfg, np.random.default_rng(11), fits=fits)[0]
        b = forecast_window(data, cfg, np.random.default_rng(11), fits=fits)[0]
        assert np.array_equal(a.draws, b.draws)

    def test_missing_covariate_rows_dropped(self):
        data, _ = small_window(neighbor=True)
        y = data.y.copy()
        z = data.z.copy()
        z[5:20, 0] = np.nan
        broken = OffsiteWindowData(
            station_id=data.station_id,
            origin=data.origin,
            horizon=data.horizon,
            y=y,
            hours=data.hours,
            neighbor_ids=data.neighbor_ids,
            z=z,
            z_target=data.z_target,
            target_hour=data.target_hour,
        )
        fit = fit_stage1(broken, FitConfig())
        assert np.all(np.isnan(fit.eta_train[5:20]))
        assert fit.n_obs <= np.isfinite(broken.y).sum() - 15


class TestSpacetimeFit:
    def test_joint_fit_and_forecast(self):
        params = SimulationParams(
            mode="spacetime", kappa=9.0, xi=0.05, rho2=0.8, sigma2=0.15,
            range_km=70.0, tau2=300.0,
        )
        sts = stations(3)
        series, truth = simulate_dataset(params, sts, T=160, seed=21)
        smap = {s.station_id: s for s in series}
        data = spacetime_window_data(smap, sts, 0, 150, 1)
        cfg = FitConfig(m_draws=300)
        samples = forecast_window(data, cfg, np.random.default_rng(3))
        assert len(samples) == 3
        assert {ps.station_id for ps in samples} == {"S0", "S1", "S2"}
        for ps in samples:
            assert ps.draws.size == 300
            assert np.isfinite(ps.psi_hat) and ps.psi_hat > 0
        # pooled GP shape: one xi for every station (when stage 3 ran)
        xis = {ps.xi_hat for ps in samples}
        assert len(xis) == 1
