"""Masked discrete flow: corruption, rates, Euler sampling, tabular denoiser.

Tokens are integers in ``[0, S)``; the mask state is the integer ``S``.
"""
from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field

import numpy as np

# Jump mass within this distance of 1 is treated as a certain jump (final-step rounding).
JUMP_CLAMP_TOL = 1e-12


class OffSupportError(ValueError):
    """The observed tokens are inconsistent with every sequence in the data support."""


@dataclass(frozen=True)
class DiscreteSequence:
    tokens: np.ndarray
    step: int
    T: int

    def __post_init__(self):
        tok = np.asarray(self.tokens, dtype=np.int64)
        tok.setflags(write=False)
        object.__setattr__(self, "tokens", tok)

    @property
    def t(self) -> float:
        return self.step / self.T

    def masked(self, S: int) -> np.ndarray:
        return np.flatnonzero(self.tokens == S)


@dataclass(frozen=True)
class RateSpec:
    """Mask-flow rates; only masked dimensions carry (dense, length-S) rows."""

    dims: np.ndarray
    rows: np.ndarray
    D: int
    S: int

    def dense(self) -> np.ndarray:
        out = np.zeros((self.D, self.S))
        out[self.dims] = self.rows
        return out

    def scaled(self, factors: np.ndarray) -> "RateSpec":
        """Entry-wise product with a ``(D, S)`` factor table."""
        return RateSpec(self.dims, self.rows * factors[self.dims], self.D, self.S)


def _one_minus_t(t: float) -> float:
    if t >= 1.0:
        raise ValueError("rates are singular at t = 1")
    return 1.0 - t


def corrupt_discrete(x1, step: int, T: int, S: int, rng: np.random.Generator) -> DiscreteSequence:
    """Keep each token with probability ``t = step/T``, otherwise mask it."""
    if not 0 <= step <= T:
        raise ValueError("step must lie in [0, T]")
    x1 = np.asarray(x1, dtype=np.int64)
    keep = rng.random(x1.shape) < step / T
    return DiscreteSequence(np.where(keep, x1, S), step, T)


def conditional_rate(xt_token: int, j: int, x1_token: int, t: float, S: int) -> float:
    """Rate of ``xt_token -> j`` given the endpoint token, for the mask path."""
    scale = 1.0 / _one_minus_t(t)
    return scale if (xt_token == S and j == x1_token) else 0.0


def conditional_rates(tokens, x1, t: float, S: int) -> RateSpec:
    """Endpoint-conditioned rates for a whole sequence."""
    tokens = np.asarray(tokens)
    dims = np.flatnonzero(tokens == S)
    rows = np.zeros((dims.size, S))
    rows[np.arange(dims.size), np.asarray(x1)[dims]] = 1.0 / _one_minus_t(t)
    return RateSpec(dims, rows, tokens.shape[0], S)


def model_rate(tokens, probs, t: float, S: int) -> RateSpec:
    """Denoiser-averaged rates: ``u(j | x_t) / (1 - t)`` on masked dimensions.

    ``probs`` is the ``(D, S)`` denoiser output or a denoiser to call on ``tokens``.
    """
    tokens = np.asarray(tokens)
    if callable(probs):
        probs = probs(tokens)
    dims = np.flatnonzero(tokens == S)
    rows = np.asarray(probs, dtype=np.float64)[dims] / _one_minus_t(t)
    return RateSpec(dims, rows, tokens.shape[0], S)


def jump_probs(tokens, rates: RateSpec, dt: float) -> np.ndarray:
    """Per-dimension next-token law over ``[S] + {mask}``, shape ``(D, S+1)``.

    Jumps get ``rate * dt``; the residual goes to staying put.  Total jump mass
    above 1 (or within rounding of it) is renormalised to exactly 1.
    """
    tokens = np.asarray(tokens)
    S = rates.S
    if np.any(rates.rows < 0):
        raise ValueError("rates must be nonnegative")
    out = np.zeros((tokens.shape[0], S + 1))
    out[np.arange(tokens.shape[0]), tokens] = 1.0
    if rates.dims.size:
        jump = rates.rows * dt
        total = jump.sum(axis=1)
        over = total >= 1.0 - JUMP_CLAMP_TOL
        jump[over] /= total[over, None]
        stay = np.where(over, 0.0, 1.0 - total)
        out[rates.dims] = 0.0
        out[rates.dims, :S] = jump
        out[rates.dims, tokens[rates.dims]] += stay
    return out


def sample_categorical(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw along the last axis with fixed category order."""
    c = np.cumsum(probs, axis=-1)
    c[..., -1] = np.inf
    return np.argmax(u[..., None] < c, axis=-1)


def euler_step(state: DiscreteSequence, rates: RateSpec, dt: float, rng: np.random.Generator) -> DiscreteSequence:
    p = jump_probs(state.tokens, rates, dt)
    u = rng.random(p.shape[0])
    new = sample_categorical(p, u)
    return DiscreteSequence(new, state.step + 1, state.T)


def sample_clean(probs: np.ndarray, rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` independent draws of a full clean sequence from per-dimension categoricals."""
    u = rng.random((n, probs.shape[0]))
    return sample_categorical(probs[None], u)


class TabularDataDistribution:
    """Explicit probability table over ``[S]^D``."""

    def __init__(self, table, S: int | None = None, D: int | None = None):
        if isinstance(table, dict):
            if S is None or D is None:
                raise ValueError("S and D are required when the table is a dict")
            arr = np.zeros((S,) * D)
            for seq, p in table.items():
                arr[tuple(seq)] = p
            table = arr
        arr = np.asarray(table, dtype=np.float64)
        if arr.ndim == 0 or len(set(arr.shape)) != 1:
            raise ValueError("table must have shape (S,)*D")
        if np.any(arr < 0):
            raise ValueError("probabilities must be nonnegative")
        total = arr.sum()
        if total <= 0:
            raise ValueError("support must be nonempty")
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"table sums to {float(total)!r}, not 1")
        arr.setflags(write=False)
        self.table = arr
        self.D = arr.ndim
        self.S = arr.shape[0]

    def prob(self, x) -> float:
        return float(self.table[tuple(np.asarray(x))])

    def marginals(self) -> np.ndarray:
        axes = range(self.D)
        return np.stack([self.table.sum(axis=tuple(a for a in axes if a != d)) for d in axes])

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        flat = rng.choice(self.table.size, size=n, p=self.table.ravel())
        return np.stack(np.unravel_index(flat, self.table.shape), axis=-1)

    @classmethod
    def count_weighted(cls, D: int, S: int, token_logits, pair_coupling: float = 0.0):
        """``p(x) ∝ exp(sum_s a_s * count_s(x) + b * #{adjacent equal pairs})``."""
        a = np.asarray(token_logits, dtype=np.float64)
        if a.shape != (S,):
            raise ValueError("token_logits must have length S")
        grids = np.indices((S,) * D).reshape(D, -1).T
        counts = np.stack([(grids == s).sum(axis=1) for s in range(S)], axis=1)
        pairs = (grids[:, 1:] == grids[:, :-1]).sum(axis=1)
        logp = counts @ a + pair_coupling * pairs
        p = np.exp(logp - logp.max())
        p /= p.sum()
        return cls(p.reshape((S,) * D))


class TabularDenoiser:
    """Exact Bayes posterior ``p(x1^(d) | x_t)`` by enumeration over the table.

    Results are memoised per observed pattern; the cache is guarded so the
    denoiser can be shared across threads.
    """

    def __init__(self, data: TabularDataDistribution, cache_size: int = 200_000):
        self.data = data
        self.S = data.S
        self.D = data.D
        self._cache: dict[bytes, np.ndarray] = {}
        self._cache_size = cache_size
        self._lock = threading.Lock()

    def _compute(self, tokens: np.ndarray) -> np.ndarray:
        S = self.S
        masked = tokens == S
        index = tuple(slice(None) if m else int(tok) for tok, m in zip(tokens, masked))
        sub = self.data.table[index]
        z = sub.sum()
        if z <= 0:
            raise OffSupportError(f"no sequence in the support matches {tokens.tolist()}")
        out = np.zeros((self.D, S))
        obs = np.flatnonzero(~masked)
        out[obs, tokens[obs]] = 1.0
        mdims = np.flatnonzero(masked)
        n = mdims.size
        for k, d in enumerate(mdims):
            other = tuple(a for a in range(n) if a != k)
            out[d] = sub.sum(axis=other) / z
        return out

    def predict(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        key = tokens.tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        out = self._compute(tokens)
        out.setflags(write=False)
        with self._lock:
            if len(self._cache) >= self._cache_size:
                self._cache.clear()
            self._cache[key] = out
        return out

    def __call__(self, tokens, step=None):
        return self.predict(tokens)

    def predict_batch(self, tokens: np.ndarray) -> np.ndarray:
        uniq, inv = np.unique(tokens, axis=0, return_inverse=True)
        probs = np.stack([self.predict(row) for row in uniq])
        return probs[inv.reshape(-1)]


def tabular_posterior(state_or_tokens, data: TabularDataDistribution) -> np.ndarray:
    tokens = getattr(state_or_tokens, "tokens", state_or_tokens)
    return TabularDenoiser(data)._compute(np.asarray(tokens, dtype=np.int64))


def enumerate_sequences(D: int, S: int) -> np.ndarray:
    return np.array(list(itertools.product(range(S), repeat=D)), dtype=np.int64)


@dataclass
class DiscreteCore:
    """Mask-flow sampler bundle driven by the search engine."""

    T: int
    denoiser: TabularDenoiser
    D: int = field(init=False)
    S: int = field(init=False)
    kind: str = field(default="discrete", init=False)

    def __post_init__(self):
        if self.T < 2:
            raise ValueError("T must be >= 2")
        self.D = self.denoiser.D
        self.S = self.denoiser.S

    @property
    def mask(self) -> int:
        return self.S

    @property
    def dt(self) -> float:
        return 1.0 / self.T

    def time(self, step: int) -> float:
        return step / self.T

    def prior(self, rng=None) -> DiscreteSequence:
        return DiscreteSequence(np.full(self.D, self.S), 0, self.T)

    def predict(self, state: DiscreteSequence) -> np.ndarray:
        return self.denoiser.predict(state.tokens)

    def rates(self, state: DiscreteSequence, probs: np.ndarray | None = None) -> RateSpec:
        if probs is None:
            probs = self.predict(state)
        return model_rate(state.tokens, probs, self.time(state.step), self.S)

    def step(self, state: DiscreteSequence, rng: np.random.Generator, probs=None) -> DiscreteSequence:
        if state.step >= self.T:
            raise ValueError("cannot step past t = 1")
        return euler_step(state, self.rates(state, probs), self.dt, rng)

    def clean(self, state: DiscreteSequence) -> np.ndarray:
        return np.asarray(state.tokens)

    def sample_unguided(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Batched unguided rollout from all-mask to t = 1; returns ``(n, D)`` tokens."""
        S, D = self.S, self.D
        tokens = np.full((n, D), S, dtype=np.int64)
        for step in range(self.T):
            t = self.time(step)
            probs = self.denoiser.predict_batch(tokens)          # (n, D, S)
            masked = tokens == S
            jump = probs * (self.dt / (1.0 - t))
            total = jump.sum(axis=-1)
            over = total >= 1.0 - JUMP_CLAMP_TOL
            jump = np.where(over[..., None], jump / total[..., None], jump)
            stay = np.where(over, 0.0, 1.0 - total)
            law = np.concatenate([jump, stay[..., None]], axis=-1)
            new = sample_categorical(law, rng.random((n, D)))
            tokens = np.where(masked, new, tokens)
        return tokens
