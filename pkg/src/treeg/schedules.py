"""Noise schedules on a uniform time grid.

Time runs from t=0 (pure noise) to t=1 (clean data), so ``alpha_bar`` is
increasing in t and equals 1 at the last node.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ALPHA_BAR_MIN = 1e-4
COSINE_OFFSET = 0.008


@dataclass(frozen=True)
class StepCoeffs:
    alpha: float
    sigma: float
    c1: float
    c2: float
    beta: float


def coeffs_from_alpha_bars(ab_t: float, ab_next: float) -> StepCoeffs:
    """DDPM reverse-step coefficients for the move ``ab_t -> ab_next``.

    A flat pair (``ab_t == ab_next``) gives the identity step.
    """
    ab_t = float(ab_t)
    ab_next = float(ab_next)
    if not (0.0 < ab_t <= ab_next <= 1.0):
        raise ValueError(f"need 0 < alpha_bar_t <= alpha_bar_next <= 1, got {ab_t}, {ab_next}")
    alpha = ab_t / ab_next
    if ab_t == ab_next:
        return StepCoeffs(alpha=1.0, sigma=0.0, c1=1.0, c2=0.0, beta=0.0)
    one_m = 1.0 - ab_t
    c1 = np.sqrt(alpha) * (1.0 - ab_next) / one_m
    c2 = np.sqrt(ab_next) * (1.0 - alpha) / one_m
    beta = (1.0 - ab_next) * (1.0 - alpha) / one_m
    return StepCoeffs(alpha=alpha, sigma=float(np.sqrt(1.0 - alpha)), c1=float(c1), c2=float(c2), beta=float(beta))


@dataclass(frozen=True)
class NoiseSchedule:
    """Uniform grid ``t_i = i/T`` with signal levels ``alpha_bar[i]``."""

    T: int
    alpha_bar: np.ndarray = field(repr=False)
    kind: str = "custom"

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)
        if ab.shape != (self.T + 1,):
            raise ValueError(f"alpha_bar must have T+1={self.T + 1} entries, got {ab.shape}")

    @property
    def dt(self) -> float:
        return 1.0 / self.T

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.T + 1) / self.T

    def time(self, step: int) -> float:
        return step / self.T

    def validate(self) -> None:
        ab = self.alpha_bar
        if not np.all(np.diff(ab) > 0):
            raise ValueError("alpha_bar must be strictly increasing in t")
        if ab[-1] != 1.0:
            raise ValueError("alpha_bar at t=1 must be exactly 1")
        if not (0.0 < ab[0] <= ALPHA_BAR_MIN):
            raise ValueError(f"alpha_bar at t=0 must lie in (0, {ALPHA_BAR_MIN}]")

    def step_coeffs(self, step: int) -> StepCoeffs:
        """Coefficients for the step from grid node ``step`` to ``step + 1``."""
        if not 0 <= step < self.T:
            raise ValueError(f"step must be in [0, {self.T}); t=1 has no next step")
        return coeffs_from_alpha_bars(self.alpha_bar[step], self.alpha_bar[step + 1])

    def rho(self, step: int, scale: float = 1.0) -> float:
        """Destination exploration width ``s * sigma_t / sqrt(1 + sigma_t^2)``."""
        sigma = self.step_coeffs(step).sigma
        return scale * sigma / np.sqrt(1.0 + sigma**2)


def _cosine_profile(t: np.ndarray) -> np.ndarray:
    # Improved-DDPM cosine curve in reversed time, normalised to 0 at t=0 and 1 at t=1.
    s = COSINE_OFFSET
    f = np.cos(0.5 * np.pi * ((1.0 - t) + s) / (1.0 + s)) ** 2
    f0 = np.cos(0.5 * np.pi * s / (1.0 + s)) ** 2
    return np.clip(f / f0, 0.0, 1.0)


def build_schedule(kind: str, T: int) -> NoiseSchedule:
    """Build a ``linear-alphabar`` or ``cosine`` schedule with ``T`` steps.

    Both kinds map their profile affinely onto ``[1e-4, 1]``.
    """
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T!r}")
    t = np.arange(T + 1) / T
    if kind == "linear-alphabar":
        profile = t
    elif kind == "cosine":
        profile = _cosine_profile(t)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    ab = ALPHA_BAR_MIN + (1.0 - ALPHA_BAR_MIN) * profile
    ab[0] = ALPHA_BAR_MIN
    ab[-1] = 1.0
    sched = NoiseSchedule(T=int(T), alpha_bar=ab, kind=kind)
    sched.validate()
    return sched
