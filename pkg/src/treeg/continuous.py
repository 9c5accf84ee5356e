"""Continuous-state DDPM core with an exact Gaussian-mixture denoiser."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .schedules import NoiseSchedule


@dataclass(frozen=True)
class GaussianMixtureData:
    """Diagonal Gaussian mixture used as the clean-data distribution."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        v = np.asarray(self.variances, dtype=np.float64)
        # scalar, one isotropic variance per component, or a full (K, D) table
        if v.ndim == 1 and v.shape[0] == w.shape[0]:
            v = v[:, None]
        v = np.array(np.broadcast_to(v, mu.shape))
        if w.ndim != 1 or w.shape[0] != mu.shape[0]:
            raise ValueError("weights must be a vector with one entry per component")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        if np.any(v <= 0):
            raise ValueError("component variances must be strictly positive")
        for name, arr in (("weights", w), ("means", mu), ("variances", v)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        size = 1 if n is None else n
        k = rng.choice(self.n_components, size=size, p=self.weights)
        x = self.means[k] + np.sqrt(self.variances[k]) * rng.standard_normal((size, self.dim))
        return x[0] if n is None else x


@dataclass(frozen=True)
class ContinuousState:
    x: np.ndarray
    step: int

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise ValueError("state contains non-finite entries")
        object.__setattr__(self, "x", x)


class GMMDenoiser:
    """Exact ``E[x1 | x_t]`` for Gaussian-mixture data.

    Besides the posterior mean it exposes a vector-Jacobian product so that
    gradient guidance can differentiate through the denoiser in closed form.
    """

    def __init__(self, gmm: GaussianMixtureData, schedule: NoiseSchedule):
        self.gmm = gmm
        self.schedule = schedule

    def _parts(self, x: np.ndarray, step: int):
        ab = self.schedule.alpha_bar[step]
        a = np.sqrt(ab)
        mu, v = self.gmm.means, self.gmm.variances
        s2 = ab * v + (1.0 - ab)                        # marginal variance of x_t per component
        resid = x[..., None, :] - a * mu                 # (..., K, D)
        log_r = (np.log(self.gmm.weights)
                 - 0.5 * np.sum(resid**2 / s2 + np.log(2 * np.pi * s2), axis=-1))
        log_r = log_r - logsumexp(log_r, axis=-1, keepdims=True)
        r = np.exp(log_r)                                # (..., K)
        gain = a * v / s2                                # (K, D)
        m = mu + gain * resid                            # per-component posterior means
        return r, m, gain, resid, s2

    def predict_x1(self, x: np.ndarray, step: int) -> np.ndarray:
        r, m, *_ = self._parts(np.asarray(x, dtype=np.float64), step)
        return np.einsum("...k,...kd->...d", r, m)

    def vjp(self, x: np.ndarray, step: int, cotangent: np.ndarray) -> np.ndarray:
        """Return ``J^T cotangent`` where ``J = d predict_x1 / d x``."""
        x = np.asarray(x, dtype=np.float64)
        r, m, gain, resid, s2 = self._parts(x, step)
        g = -resid / s2                                  # d log N_k / d x
        g_bar = np.einsum("k,kd->d", r, g)
        proj = m @ cotangent                             # (K,)
        return (np.einsum("k,kd->d", r, gain) * cotangent
                + np.einsum("k,kd->d", r * proj, g - g_bar))

    def __call__(self, x, step):
        return self.predict_x1(x, step)


def finite_difference_vjp(denoiser, x: np.ndarray, step: int, cotangent: np.ndarray, h=None) -> np.ndarray:
    """Central-difference fallback for denoisers without sensitivities."""
    x = np.asarray(x, dtype=np.float64)
    if h is None:
        h = 1e-5 * np.linalg.norm(x) + 1e-8
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = cotangent @ (denoiser(x + e, step) - denoiser(x - e, step)) / (2 * h)
    return out


def gmm_posterior_mean(state: ContinuousState, gmm: GaussianMixtureData, schedule: NoiseSchedule) -> np.ndarray:
    return GMMDenoiser(gmm, schedule).predict_x1(state.x, state.step)


def corrupt_continuous(x1, step: int, schedule: NoiseSchedule, rng: np.random.Generator) -> ContinuousState:
    x1 = np.asarray(x1, dtype=np.float64)
    ab = schedule.alpha_bar[step]
    eps = rng.standard_normal(x1.shape)
    return ContinuousState(np.sqrt(ab) * x1 + np.sqrt(1.0 - ab) * eps, step)


def ddpm_mean(state: ContinuousState, x1_hat: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    c = schedule.step_coeffs(state.step)
    return c.c1 * state.x + c.c2 * x1_hat


def ddpm_step(state: ContinuousState, denoiser, schedule: NoiseSchedule, rng: np.random.Generator,
              x1_hat: np.ndarray | None = None) -> ContinuousState:
    """One reverse step ``c1 x_t + c2 u(x_t) + sigma_t eps``.

    ``x1_hat`` may be passed in when the caller already holds the denoiser
    output for this state.
    """
    c = schedule.step_coeffs(state.step)
    if x1_hat is None:
        x1_hat = denoiser(state.x, state.step)
    eps = rng.standard_normal(state.x.shape)
    return ContinuousState(c.c1 * state.x + c.c2 * x1_hat + c.sigma * eps, state.step + 1)


def posterior_step(state: ContinuousState, x1, schedule: NoiseSchedule, rng: np.random.Generator) -> ContinuousState:
    """Sample ``N(c1 x_t + c2 x1, beta_t I)``, the bridge toward a known endpoint."""
    c = schedule.step_coeffs(state.step)
    eps = rng.standard_normal(state.x.shape)
    return ContinuousState(c.c1 * state.x + c.c2 * np.asarray(x1) + np.sqrt(c.beta) * eps, state.step + 1)


def composite_variance_gap(schedule: NoiseSchedule) -> np.ndarray:
    """Per-step ``c2^2 (1-alpha) + beta - (1-alpha)``.

    This is the variance mismatch between drawing ``x1_hat ~ N(u, (1-alpha) I)``
    followed by the posterior step, and the plain DDPM step.  The means agree
    exactly; the variances only agree at the final step.
    """
    gaps = np.empty(schedule.T)
    for i in range(schedule.T):
        c = schedule.step_coeffs(i)
        gaps[i] = c.c2**2 * (1.0 - c.alpha) + c.beta - c.sigma**2
    return gaps


@dataclass
class ContinuousCore:
    """Bundle of schedule and denoiser that the search engine drives."""

    schedule: NoiseSchedule
    denoiser: GMMDenoiser
    dim: int = field(init=False)
    kind: str = field(default="continuous", init=False)

    def __post_init__(self):
        self.dim = self.denoiser.gmm.dim

    @property
    def T(self) -> int:
        return self.schedule.T

    def prior(self, rng: np.random.Generator) -> ContinuousState:
        return ContinuousState(rng.standard_normal(self.dim), 0)

    def predict(self, state: ContinuousState) -> np.ndarray:
        return self.denoiser(state.x, state.step)

    def step(self, state: ContinuousState, rng: np.random.Generator, x1_hat=None) -> ContinuousState:
        return ddpm_step(state, self.denoiser, self.schedule, rng, x1_hat=x1_hat)

    def clean(self, state: ContinuousState) -> np.ndarray:
        return state.x
