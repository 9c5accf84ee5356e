import numpy as np
import pytest

from treeg.continuous import (
    ContinuousCore,
    ContinuousState,
    GaussianMixtureData,
    GMMDenoiser,
    corrupt_continuous,
    ddpm_step,
    finite_difference_vjp,
    gmm_posterior_mean,
    composite_variance_gap,
    posterior_step,
)
from treeg.rng import stream
from treeg.schedules import NoiseSchedule, StepCoeffs, build_schedule

# E[x1 | x_t] for w=(0.3,0.7), mu=(-1.2,0.8), v=(0.4,1.3), by 40-digit quadrature
QUAD_ORACLE = [(0.3, 0.5, 0.5296674764813247), (0.9, -0.7, -0.74347782612247336),
               (0.05, 2.0, 1.0054910613399093)]


def _sched():
    return NoiseSchedule(4, np.array([1e-4, 0.05, 0.3, 0.9, 1.0]))


def test_gmm_validation():
    with pytest.raises(ValueError):
        GaussianMixtureData([0.5, 0.6], [[0.0], [1.0]], [1.0, 1.0])
    with pytest.raises(ValueError):
        GaussianMixtureData([0.5, 0.5], [[0.0], [1.0]], [1.0, 0.0])


@pytest.mark.parametrize("ab,xt,expected", QUAD_ORACLE)
def test_posterior_mean_matches_quadrature(ab, xt, expected):
    gmm = GaussianMixtureData([0.3, 0.7], [[-1.2], [0.8]], [[0.4], [1.3]])
    sched = _sched()
    step = int(np.flatnonzero(sched.alpha_bar == ab)[0])
    got = gmm_posterior_mean(ContinuousState(np.array([xt]), step), gmm, sched)
    assert abs(got[0] - expected) < 1e-6


def test_symmetric_mixture_zero():
    gmm = GaussianMixtureData([0.5, 0.5], [[-1.0], [1.0]], [0.3, 0.3])
    got = GMMDenoiser(gmm, _sched()).predict_x1(np.array([0.0]), 2)
    assert abs(got[0]) < 1e-15


def test_point_mass_limit():
    gmm = GaussianMixtureData([1.0], [[0.7, -0.2]], [1e-12])
    got = GMMDenoiser(gmm, _sched()).predict_x1(np.array([5.0, -3.0]), 2)
    np.testing.assert_allclose(got, [0.7, -0.2], atol=1e-9)


def test_denoiser_identity_at_t1():
    gmm = GaussianMixtureData([0.4, 0.6], [[-1.0, 0.0], [1.0, 2.0]], [0.5, 0.8])
    x = np.array([0.3, -0.9])
    np.testing.assert_allclose(GMMDenoiser(gmm, _sched()).predict_x1(x, 4), x, atol=1e-15)


def test_extreme_responsibilities_finite():
    gmm = GaussianMixtureData([0.5, 0.5], [[-50.0] * 3, [50.0] * 3], [1e-3, 1e-3])
    sched = build_schedule("linear-alphabar", 100)
    out = GMMDenoiser(gmm, sched).predict_x1(np.array([40.0, 40.0, 40.0]), 99)
    assert np.all(np.isfinite(out))


def test_binned_simulation_agrees():
    # D=1 consistency: simulate (x1, x_t) pairs and average x1 over a bin around x_t
    gmm = GaussianMixtureData([0.3, 0.7], [[-1.2], [0.8]], [[0.4], [1.3]])
    sched = _sched()
    rng = stream(5, "bin")
    n = 2_000_000
    x1 = gmm.sample(rng, n)[:, 0]
    ab = 0.3
    xt = np.sqrt(ab) * x1 + np.sqrt(1 - ab) * rng.standard_normal(n)
    sel = np.abs(xt - 0.5) < 0.01
    est = x1[sel].mean()
    se = x1[sel].std() / np.sqrt(sel.sum())
    assert abs(est - 0.5296674764813247) < 4 * se + 2e-3


def test_vjp_matches_finite_differences():
    rng = stream(2, "vjp")
    gmm = GaussianMixtureData([0.2, 0.5, 0.3], rng.normal(0, 1, (3, 4)), rng.uniform(0.3, 1.2, (3, 4)))
    sched = build_schedule("cosine", 20)
    den = GMMDenoiser(gmm, sched)
    for step in (2, 10, 18):
        x, cot = rng.standard_normal(4), rng.standard_normal(4)
        a = den.vjp(x, step, cot)
        b = finite_difference_vjp(den, x, step, cot)
        np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-8)


def test_corrupt_t1_and_determinism():
    sched = build_schedule("linear-alphabar", 10)
    x1 = np.array([0.3, -1.0])
    assert np.array_equal(corrupt_continuous(x1, 10, sched, stream(0)).x, x1)
    a = corrupt_continuous(x1, 4, sched, stream(9, "c")).x
    b = corrupt_continuous(x1, 4, sched, stream(9, "c")).x
    assert np.array_equal(a, b)


def test_corrupt_moments():
    sched = build_schedule("linear-alphabar", 10)
    ab = sched.alpha_bar[3]
    n = 100_000
    x = corrupt_continuous(np.zeros((n, 3)), 3, sched, stream(2, "mm")).x
    se = np.sqrt((1 - ab) / n)
    assert np.all(np.abs(x.mean(axis=0)) < 4 * se)
    assert np.all(np.abs(x.var(axis=0) / (1 - ab) - 1) < 0.05)


def test_ddpm_step_identity_and_deterministic_limit():
    flat = NoiseSchedule(2, np.array([0.5, 0.5, 1.0]))
    st = ContinuousState(np.array([1.0, 2.0]), 0)
    out = ddpm_step(st, lambda x, s: np.zeros(2), flat, stream(0))
    assert np.array_equal(out.x, st.x) and out.step == 1

    class ZeroNoise:
        def step_coeffs(self, step):
            return StepCoeffs(alpha=0.5, sigma=0.0, c1=0.3, c2=0.6, beta=0.0)

    out = ddpm_step(ContinuousState(np.array([0.4]), 1), lambda x, s: np.array([3.0]), ZeroNoise(), stream(0))
    assert out.x[0] == 0.3 * 0.4 + 0.6 * 3.0


def test_ddpm_step_moments():
    sched = build_schedule("linear-alphabar", 10)
    c = sched.step_coeffs(4)
    x = np.array([0.5, -0.3])
    u = np.array([1.0, 2.0])
    n = 100_000
    state = ContinuousState(np.tile(x, (n, 1)), 4)
    out = ddpm_step(state, None, sched, stream(3), x1_hat=np.tile(u, (n, 1))).x
    mean = c.c1 * x + c.c2 * u
    assert np.all(np.abs(out.mean(axis=0) - mean) < 4 * c.sigma / np.sqrt(n))
    assert np.all(np.abs(out.var(axis=0) / c.sigma**2 - 1) < 0.05)


def test_posterior_step_moments_and_degenerate():
    sched = build_schedule("linear-alphabar", 10)
    c = sched.step_coeffs(4)
    x, x1 = np.array([0.5, -0.3]), np.array([1.0, 2.0])
    n = 100_000
    out = posterior_step(ContinuousState(np.tile(x, (n, 1)), 4), np.tile(x1, (n, 1)), sched, stream(4)).x
    mean = c.c1 * x + c.c2 * x1
    assert np.all(np.abs(out.mean(axis=0) - mean) < 4 * np.sqrt(c.beta / n))
    assert np.all(np.abs(out.var(axis=0) / c.beta - 1) < 0.05)
    last = sched.step_coeffs(9)
    assert last.beta == 0.0
    o = posterior_step(ContinuousState(x, 9), x1, sched, stream(0)).x
    np.testing.assert_array_equal(o, last.c1 * x + last.c2 * x1)


def test_step_past_one_rejected():
    sched = build_schedule("linear-alphabar", 4)
    with pytest.raises(ValueError):
        posterior_step(ContinuousState(np.zeros(1), 4), np.zeros(1), sched, stream(0))
    with pytest.raises(ValueError):
        ddpm_step(ContinuousState(np.zeros(1), 4), lambda x, s: x, sched, stream(0))


def test_composite_mean_simulation():
    # draw x1_hat ~ N(u, (1-alpha) I), then the posterior step: mean matches the DDPM step
    sched = build_schedule("linear-alphabar", 10)
    c = sched.step_coeffs(5)
    x, u = np.array([0.2]), np.array([-0.6])
    n = 200_000
    rng = stream(8)
    x1 = u + np.sqrt(1 - c.alpha) * rng.standard_normal((n, 1))
    out = posterior_step(ContinuousState(np.tile(x, (n, 1)), 5), x1, sched, rng).x
    sd = np.sqrt(c.c2**2 * (1 - c.alpha) + c.beta)
    assert abs(out.mean() - (c.c1 * x[0] + c.c2 * u[0])) < 4 * sd / np.sqrt(n)


def test_variance_gap_profile():
    g = composite_variance_gap(build_schedule("linear-alphabar", 100))
    assert g[-1] == pytest.approx(0.0, abs=1e-15)
    assert np.all(g[:-1] < 0)   # the composite is under-dispersed before the last step


def test_state_rejects_nan():
    with pytest.raises(ValueError):
        ContinuousState(np.array([np.nan]), 0)


def test_core_prior_and_clean():
    sched = build_schedule("linear-alphabar", 5)
    gmm = GaussianMixtureData([1.0], [[0.0, 0.0]], [1.0])
    core = ContinuousCore(sched, GMMDenoiser(gmm, sched))
    s = core.prior(stream(0))
    assert s.step == 0 and s.x.shape == (2,)
    assert core.dim == 2 and core.T == 5
