"""Burst photon statistics, generating functions, and theta transforms."""

import math

import numpy as np
import pytest
import scipy.special
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from htmm.alexa import (
    CameraModel,
    InnerAlexaParams,
    ThetaParams,
    camera_theta,
    conditional_burst_law,
    conditional_gen_fn_Y,
    gen_fn_B,
    gen_fn_Y,
    lambert_w_m1,
    q00_from_inner,
    q00_from_theta2,
    sample_frame,
    theta_from_inner,
    thin_inner,
    thin_theta,
)
from htmm.errors import OutOfConvergenceRegion, OutOfDomain


def draw_frames(params, n, seed):
    """Independent Monte-Carlo oracle for the burst model (vectorized)."""
    gen = np.random.default_rng(seed)
    z = gen.poisson(params.rate, n)
    g = gen.geometric(1.0 - params.q, n) - 1
    b = np.minimum(z, g)
    photons = np.zeros(n, dtype=np.int64)
    nz = b > 0
    photons[nz] = gen.negative_binomial(b[nz], 1.0 - params.p)
    return photons, z > g, b


class TestQ00FromInner:
    def test_unit_exponent(self):
        params = InnerAlexaParams(p=0.5, q=0.99, rate=100.0)
        assert q00_from_inner(params) == pytest.approx(math.exp(-1.0),
                                                       rel=1e-12)

    def test_vanishing_rate_limit(self):
        params = InnerAlexaParams(p=0.5, q=0.5, rate=1e-12)
        assert q00_from_inner(params) == pytest.approx(1.0, abs=1e-10)

    def test_monte_carlo_agreement(self):
        params = InnerAlexaParams(p=0.5, q=0.995, rate=400.0)
        n = 200_000
        _, exited, _ = draw_frames(params, n, seed=101)
        q00 = q00_from_inner(params)
        assert q00 == pytest.approx(math.exp(-2.0), rel=1e-12)
        se = math.sqrt(q00 * (1 - q00) / n)
        assert abs((1.0 - exited.mean()) - q00) < 3 * se


class TestThetaFromInner:
    def test_closed_form_example(self):
        params = InnerAlexaParams(p=0.5, q=0.99, rate=100.0)
        theta = theta_from_inner(params)
        expected = 1.0 * 99.0 * (1.0 - math.exp(-1.0))
        assert theta.theta1 == pytest.approx(expected, rel=1e-12)

    def test_theta2_limit_near_one(self):
        # -q ln q / (1 - q) -> 1 as q00 -> 1
        params = InnerAlexaParams(p=0.5, q=0.9, rate=1e-9)
        theta = theta_from_inner(params)
        assert theta.theta2 == pytest.approx(1.0, abs=1e-6)

    def test_monte_carlo_mean_and_variance(self):
        params = InnerAlexaParams(p=0.9, q=0.995, rate=200.0)
        theta = theta_from_inner(params)
        n = 400_000
        photons, _, _ = draw_frames(params, n, seed=7)
        mean = photons.mean()
        se_mean = photons.std(ddof=1) / math.sqrt(n)
        assert abs(mean - theta.theta1) < 3 * se_mean
        var = photons.var(ddof=1)
        theta3_hat = var / mean**2 - 1.0 / mean
        # delta-method standard error via the fourth moment
        m4 = scipy.stats.moment(photons, 4)
        se_var = math.sqrt((m4 - var**2) / n)
        se_theta3 = se_var / mean**2 * 1.5
        assert abs(theta3_hat - theta.theta3) < 3 * se_theta3


class TestLambertW:
    def test_defining_identity(self):
        for x in np.geomspace(1e-12, 1.0 / math.e - 1e-12, 300) * -1.0:
            w = lambert_w_m1(x)
            assert w <= -1.0 + 1e-12
            assert w * math.exp(w) == pytest.approx(x, rel=1e-10)

    def test_against_scipy_away_from_branch(self):
        # scipy itself loses accuracy right at the branch point
        for x in np.linspace(-1.0 / math.e + 1e-6, -1e-6, 200):
            mine = lambert_w_m1(x)
            ref = scipy.special.lambertw(x, k=-1).real
            assert mine == pytest.approx(ref, rel=1e-11, abs=1e-11)

    def test_domain_errors(self):
        with pytest.raises(OutOfDomain):
            lambert_w_m1(0.1)
        with pytest.raises(OutOfDomain):
            lambert_w_m1(-1.0)


class TestQ00FromTheta2:
    def test_exact_point(self):
        theta2 = math.exp(-1.0) / (1.0 - math.exp(-1.0))
        assert q00_from_theta2(theta2) == pytest.approx(math.exp(-1.0),
                                                        abs=1e-12)

    def test_roundtrip_grid(self):
        for q00 in np.arange(0.05, 0.951, 0.05):
            theta2 = -q00 * math.log(q00) / (1.0 - q00)
            assert abs(q00_from_theta2(theta2) - q00) < 1e-10

    def test_roundtrip_extremes(self):
        for q00 in (0.01, 0.02, 0.97, 0.99):
            theta2 = -q00 * math.log(q00) / (1.0 - q00)
            assert abs(q00_from_theta2(theta2) - q00) < 1e-10

    def test_monotone_and_high_end(self):
        grid = np.linspace(0.2, 0.999, 50)
        values = [q00_from_theta2(t) for t in grid]
        assert np.all(np.diff(values) > 0)
        assert q00_from_theta2(0.999) > 0.99

    def test_out_of_domain(self):
        with pytest.raises(OutOfDomain):
            q00_from_theta2(1.0)
        with pytest.raises(OutOfDomain):
            q00_from_theta2(0.0)


class TestGeneratingFunctions:
    params = InnerAlexaParams(p=0.8, q=0.99, rate=50.0)

    def test_normalization(self):
        assert gen_fn_B(0.0, self.params) == pytest.approx(1.0, abs=1e-14)
        assert gen_fn_Y(0.0, self.params) == pytest.approx(1.0, abs=1e-14)
        for exited in (False, True):
            assert conditional_gen_fn_Y(0.0, self.params, exited) == \
                pytest.approx(1.0, abs=1e-12)

    def test_derivative_is_theta1(self):
        theta = theta_from_inner(self.params)
        h = 1e-5 / theta.theta1
        fd = (gen_fn_Y(h, self.params) - gen_fn_Y(-h, self.params)) / (2 * h)
        assert fd == pytest.approx(theta.theta1, rel=1e-6)

    def test_burst_derivative_is_burst_mean(self):
        # E[B] = q/(1-q) (1 - q00) by Wald's identity
        q00 = q00_from_inner(self.params)
        expected = self.params.q / (1 - self.params.q) * (1.0 - q00)
        h = 1e-7
        fd = (gen_fn_B(h, self.params) - gen_fn_B(-h, self.params)) / (2 * h)
        assert fd == pytest.approx(expected, rel=1e-6)

    def test_empirical_mgf(self):
        n = 300_000
        photons, exited, _ = draw_frames(self.params, n, seed=33)
        for xi in (-0.01, -0.005):
            sample = np.exp(xi * photons)
            se = sample.std(ddof=1) / math.sqrt(n)
            assert abs(sample.mean() - gen_fn_Y(xi, self.params)) < 3 * se
        # conditional versions against the split sample
        for exited_flag in (False, True):
            subset = photons[exited == exited_flag]
            sample = np.exp(-0.01 * subset)
            se = sample.std(ddof=1) / math.sqrt(len(subset))
            value = conditional_gen_fn_Y(-0.01, self.params, exited_flag)
            assert abs(sample.mean() - value) < 4 * se

    def test_decomposition_identity(self):
        q00 = q00_from_inner(self.params)
        for xi in (-0.3, -0.05, 0.001):
            combined = q00 * conditional_gen_fn_Y(xi, self.params, False) \
                + (1 - q00) * conditional_gen_fn_Y(xi, self.params, True)
            assert combined == pytest.approx(gen_fn_Y(xi, self.params),
                                             rel=1e-12)

    def test_out_of_convergence_region(self):
        with pytest.raises(OutOfConvergenceRegion):
            gen_fn_Y(-math.log(self.params.p) + 0.1, self.params)
        with pytest.raises(OutOfConvergenceRegion):
            gen_fn_B(-math.log(self.params.q) + 0.1, self.params)

    def test_removable_singularity_series(self):
        # approach q e^xi = 1 from below; values must stay smooth
        target = -math.log(self.params.q)
        xs = [target - d for d in (1e-6, 1e-9, 1e-11)]
        vals = [gen_fn_B(x, self.params) for x in xs]
        assert np.all(np.isfinite(vals))
        assert abs(vals[1] - vals[2]) < 1e-4 * abs(vals[1])


class TestConditionalBurstLaw:
    def test_reduced_rate_value(self):
        params = InnerAlexaParams(p=0.5, q=0.5, rate=10.0)
        assert conditional_burst_law(params) == pytest.approx(5.0)

    def test_q_to_one_limit(self):
        params = InnerAlexaParams(p=0.5, q=1 - 1e-9, rate=10.0)
        assert conditional_burst_law(params) == pytest.approx(10.0, rel=1e-8)

    def test_conditional_poisson_distribution(self):
        params = InnerAlexaParams(p=0.5, q=0.9, rate=5.0)
        n = 200_000
        _, exited, b = draw_frames(params, n, seed=5)
        stayed = b[~exited]
        reduced = conditional_burst_law(params)
        kmax = int(scipy.stats.poisson.ppf(1 - 1e-6, reduced)) + 1
        observed = np.bincount(stayed, minlength=kmax + 1)[: kmax + 1]
        probs = scipy.stats.poisson.pmf(np.arange(kmax + 1), reduced)
        probs[-1] += scipy.stats.poisson.sf(kmax, reduced)
        expected = probs * len(stayed)
        keep = expected > 5
        chi2 = ((observed[keep] - expected[keep]) ** 2
                / expected[keep]).sum()
        pval = scipy.stats.chi2.sf(chi2, keep.sum() - 1)
        assert pval > 0.001


class TestThinning:
    def test_identity_at_full_detection(self):
        assert thin_inner(0.37, 1.0) == pytest.approx(0.37)

    def test_half_detection_arithmetic(self):
        assert thin_inner(0.9, 0.5) == pytest.approx(9.0 / 11.0, abs=1e-12)

    def test_generating_function_invariance(self):
        params = InnerAlexaParams(p=0.85, q=0.99, rate=60.0)
        p_d = 0.35
        thinned = InnerAlexaParams(p=thin_inner(params.p, p_d),
                                   q=params.q, rate=params.rate)
        for xi in np.linspace(-0.8, 0.0, 9):
            lhs = gen_fn_Y(xi, thinned)
            rhs = gen_fn_Y(math.log1p(p_d * (math.exp(xi) - 1.0)), params)
            assert abs(lhs - rhs) < 1e-12 * max(1.0, abs(rhs))

    def test_thin_theta_componentwise(self):
        theta = ThetaParams(theta1=100.0, theta2=0.9, theta3=0.2)
        thinned = thin_theta(theta, 0.03)
        assert thinned.theta1 == pytest.approx(3.0)
        assert thinned.theta2 == theta.theta2
        assert thinned.theta3 == theta.theta3
        unchanged = thin_theta(theta, 1.0)
        assert unchanged == theta

    @given(st.floats(min_value=0.05, max_value=0.95),
           st.floats(min_value=0.05, max_value=1.0))
    @settings(max_examples=50, deadline=None)
    def test_thinning_diagram_commutes(self, p, p_d):
        params = InnerAlexaParams(p=p, q=0.99, rate=30.0)
        route_a = theta_from_inner(
            InnerAlexaParams(p=thin_inner(p, p_d), q=0.99, rate=30.0)
        )
        route_b = thin_theta(theta_from_inner(params), p_d)
        assert abs(route_a.theta1 - route_b.theta1) < 1e-10 * route_b.theta1
        assert abs(route_a.theta2 - route_b.theta2) < 1e-10
        assert abs(route_a.theta3 - route_b.theta3) < 1e-10


class TestCameraTheta:
    def test_noiseless_amplification(self):
        theta = ThetaParams(theta1=50.0, theta2=0.9, theta3=0.3)
        cam = CameraModel(a=25.0, f2=1.0, o=0.0)
        out = camera_theta(theta, cam)
        assert out.theta1 == pytest.approx(1250.0)
        assert out.theta3 == pytest.approx(theta.theta3)

    def test_excess_noise_shift(self):
        theta = ThetaParams(theta1=50.0, theta2=0.9, theta3=0.3)
        cam = CameraModel(a=1.0, f2=2.0, o=0.0)
        out = camera_theta(theta, cam)
        assert out.theta3 == pytest.approx(theta.theta3 + 1.0 / 50.0)

    def test_normalized_keeps_scale(self):
        theta = ThetaParams(theta1=50.0, theta2=0.9, theta3=0.3)
        cam = CameraModel(a=25.0, f2=1.5, o=0.0)
        out = camera_theta(theta, cam, normalized=True)
        assert out.theta1 == pytest.approx(50.0)
        assert out.theta3 == pytest.approx(theta.theta3 + 0.01)

    def test_gamma_amplified_frames_match(self):
        # simulate amplification with the matching Gamma law
        theta = ThetaParams(theta1=40.0, theta2=0.9, theta3=0.15)
        cam = CameraModel(a=1.0, f2=1.8, o=0.0)
        params = InnerAlexaParams(p=0.8, q=0.99, rate=50.0)
        base = theta_from_inner(params)
        n = 300_000
        photons, _, _ = draw_frames(params, n, seed=81)
        gen = np.random.default_rng(82)
        shape = photons / (cam.f2 - 1.0)
        amplified = np.zeros(n)
        nz = photons > 0
        amplified[nz] = gen.gamma(shape[nz], cam.f2 - 1.0)
        mean = amplified.mean()
        var = amplified.var(ddof=1)
        theta3_hat = var / mean**2 - 1.0 / mean
        target = camera_theta(base, cam)
        m4 = scipy.stats.moment(amplified, 4)
        se_var = math.sqrt((m4 - var**2) / n)
        se_theta3 = se_var / mean**2 * 1.5
        assert abs(theta3_hat - target.theta3) < 3 * se_theta3


class TestSampleFrame:
    def test_vanishing_rate(self):
        params = InnerAlexaParams(p=0.5, q=0.5, rate=1e-12)
        gen = np.random.default_rng(0)
        frames = [sample_frame(params, gen) for _ in range(2000)]
        assert all(f.photons == 0 for f in frames)
        assert not any(f.exited for f in frames)

    def test_exit_probability(self):
        params = InnerAlexaParams(p=0.6, q=0.98, rate=60.0)
        gen = np.random.default_rng(3)
        n = 60_000
        exits = sum(sample_frame(params, gen).exited for _ in range(n))
        q00 = q00_from_inner(params)
        se = math.sqrt(q00 * (1 - q00) / n)
        assert abs(exits / n - (1 - q00)) < 3 * se

    def test_mean_photons(self):
        params = InnerAlexaParams(p=0.6, q=0.98, rate=60.0)
        theta = theta_from_inner(params)
        gen = np.random.default_rng(4)
        n = 60_000
        photons = np.array([sample_frame(params, gen).photons
                            for _ in range(n)])
        se = photons.std(ddof=1) / math.sqrt(n)
        assert abs(photons.mean() - theta.theta1) < 3 * se


class TestValidation:
    def test_inner_params_bounds(self):
        with pytest.raises(ValueError):
            InnerAlexaParams(p=0.0, q=0.5, rate=1.0)
        with pytest.raises(ValueError):
            InnerAlexaParams(p=0.5, q=1.0, rate=1.0)
        with pytest.raises(ValueError):
            InnerAlexaParams(p=0.5, q=0.5, rate=0.0)

    def test_theta_bounds(self):
        with pytest.raises(ValueError):
            ThetaParams(theta1=0.0, theta2=0.5, theta3=0.0)
        with pytest.raises(ValueError):
            ThetaParams(theta1=1.0, theta2=1.0, theta3=0.0)
        with pytest.raises(ValueError):
            ThetaParams(theta1=1.0, theta2=0.5, theta3=-2.0)

    def test_camera_bounds(self):
        with pytest.raises(ValueError):
            CameraModel(a=0.0, f2=1.5, o=0.0)
        with pytest.raises(ValueError):
            CameraModel(a=1.0, f2=2.5, o=0.0)
        with pytest.raises(ValueError):
            CameraModel(a=1.0, f2=1.5, o=0.0, p_d=0.0)

    def test_json_roundtrips(self):
        inner = InnerAlexaParams(p=0.8, q=0.99, rate=21.0)
        assert InnerAlexaParams.from_dict(inner.to_dict()) == inner
        cam = CameraModel(a=20.0, f2=2.0, o=100.0, sigma=160.0, p_d=0.5)
        again = CameraModel.from_dict(cam.to_dict())
        assert again.a == cam.a and again.sigma == cam.sigma
