"""Branch-out proposals, value functions and gradient estimators.

Three proposal/value pairings are supported:

* ``sample-current``: draw the next state from the unguided sampler and score
  it by the objective at its predicted clean sample (Monte-Carlo over the
  denoiser categoricals in the discrete case).
* ``sample-destination``: draw candidate clean endpoints around the denoiser
  prediction, step toward each one, and score by the objective at the
  endpoint itself.
* ``gradient``: tilt the step with the gradient of the objective's
  Monte-Carlo estimate, then score like ``sample-current``.

Every function takes an explicit generator and an optional ``Cost`` tally.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import softmax

from .continuous import ContinuousState
from .discrete import (
    DiscreteSequence,
    OffSupportError,
    RateSpec,
    conditional_rates,
    euler_step,
    sample_categorical,
    sample_clean,
)
from .objectives import one_hot

FAMILIES = ("none", "sample-current", "sample-destination", "gradient")
RATIO_CLIP = 50.0


@dataclass
class Cost:
    """Tally of model passes, predictor calls and backpropagation passes."""

    model: int = 0
    pred: int = 0
    backprop: int = 0

    def add(self, model: int = 0, pred: int = 0, backprop: int = 0) -> None:
        self.model += model
        self.pred += pred
        self.backprop += backprop

    def __iadd__(self, other: "Cost") -> "Cost":
        self.add(other.model, other.pred, other.backprop)
        return self

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.model, self.pred, self.backprop)


def _tally(cost: Cost | None, **kw) -> None:
    if cost is not None:
        cost.add(**kw)


@dataclass(frozen=True)
class GuidanceConfig:
    """Knobs of the guidance families; branching sizes ``A``/``K`` live with the search."""

    family: str = "sample-current"
    n_mc: int = 16
    gamma: float = 1.0
    gamma_schedule: str = "constant"
    rho_scale: float = 1.0
    n_iter: int = 1
    tau: float = 0.1
    n_rao: int = 32
    dsg: bool = False
    keep_best: bool = False
    ratio_mode: str = "taylor"
    window: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "window", tuple(float(w) for w in self.window))
        self.validate()

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.n_mc < 1:
            raise ValueError("n_mc must be >= 1")
        if self.n_iter < 1:
            raise ValueError("n_iter must be >= 1")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.n_rao < 0:
            raise ValueError("n_rao must be >= 0")
        if self.rho_scale < 0:
            raise ValueError("rho_scale must be nonnegative")
        if self.ratio_mode not in ("taylor", "exact"):
            raise ValueError("ratio_mode must be 'taylor' or 'exact'")
        if self.gamma_schedule not in ("constant", "linear-ramp"):
            raise ValueError("gamma_schedule must be 'constant' or 'linear-ramp'")
        lo, hi = self.window
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValueError("window must satisfy 0 <= t_start <= t_end <= 1")

    def in_window(self, t: float) -> bool:
        return self.window[0] <= t <= self.window[1]

    def gamma_at(self, t: float) -> float:
        if self.gamma_schedule == "constant":
            return self.gamma
        lo, hi = self.window
        if hi <= lo:
            return self.gamma
        return self.gamma * min(max((t - lo) / (hi - lo), 0.0), 1.0)

    def with_(self, **kw) -> "GuidanceConfig":
        return replace(self, **kw)


@dataclass
class Candidate:
    next_state: object
    value: float | None = None
    destination: np.ndarray | None = None
    parent: int = 0
    branch: int = 0


# ---------------------------------------------------------------------------
# Monte-Carlo value of a state


def expected_objective(tokens, probs: np.ndarray, objective, S: int) -> float:
    """Exact ``E f(x1)`` under the per-dimension categoricals, by enumeration."""
    tokens = np.asarray(tokens)
    masked = np.flatnonzero(tokens == S)
    base = np.where(tokens == S, 0, tokens)
    if masked.size == 0:
        return float(objective(base))
    combos = np.array(list(itertools.product(range(S), repeat=masked.size)), dtype=np.int64)
    seqs = np.repeat(base[None], combos.shape[0], axis=0)
    seqs[:, masked] = combos
    w = np.prod(probs[masked[None, :], combos], axis=1)
    keep = w > 0
    return float(np.dot(w[keep], np.asarray(objective(seqs[keep]), dtype=np.float64)))


def mc_log_py(state, core, objective, N: int | None, rng: np.random.Generator | None,
              cost: Cost | None = None, probs=None, uniforms=None) -> float:
    """Training-free estimate of ``log p_t(y | x)``: mean objective over denoiser draws.

    ``N=None`` replaces the Monte-Carlo average by exact enumeration.
    ``uniforms`` (shape ``(N, D)``) pins the draws, which is how neighbouring
    states share random numbers.
    """
    if core.kind == "continuous":
        x1 = core.predict(state) if probs is None else probs
        _tally(cost, model=1 if probs is None else 0, pred=1)
        return float(objective(x1))
    if probs is None:
        probs = core.predict(state)
        _tally(cost, model=1)
    if N is None:
        return expected_objective(state.tokens, probs, objective, core.S)
    if uniforms is None:
        samples = sample_clean(probs, rng, N)
    else:
        samples = sample_categorical(probs[None], uniforms)
    _tally(cost, pred=N)
    return float(np.mean(objective(samples)))


def value_current(state, core, objective, N: int | None, rng, cost: Cost | None = None) -> float:
    """Score a state by the objective at its predicted clean sample(s)."""
    return mc_log_py(state, core, objective, N, rng, cost)


# ---------------------------------------------------------------------------
# proposals


def branch_out_current(state, core, rng: np.random.Generator, pre=None) -> Candidate:
    """Next state from the unguided sampler (``pre`` is the parent's denoiser output)."""
    if core.kind == "continuous":
        return Candidate(core.step(state, rng, x1_hat=pre))
    return Candidate(core.step(state, rng, probs=pre))


def branch_out_destination_discrete(state: DiscreteSequence, core, objective, rng: np.random.Generator,
                                    probs=None, cost: Cost | None = None) -> Candidate:
    """Draw a clean endpoint from the denoiser and take one endpoint-conditioned Euler step."""
    if probs is None:
        probs = core.predict(state)
        _tally(cost, model=1)
    x1_hat = sample_clean(probs, rng, 1)[0]
    rates = conditional_rates(state.tokens, x1_hat, core.time(state.step), core.S)
    nxt = euler_step(state, rates, core.dt, rng)
    _tally(cost, pred=1)
    return Candidate(nxt, value=float(objective(x1_hat)), destination=x1_hat)


def _dsg_or_noise_step(state: ContinuousState, core, x1_hat, dest, dsg: bool, rng) -> ContinuousState:
    c = core.schedule.step_coeffs(state.step)
    if dsg:
        direction = dest - x1_hat
        norm = np.linalg.norm(direction)
        if norm > 0:
            scaled = np.sqrt(direction.size) * direction / norm
            return ContinuousState(c.c1 * state.x + c.c2 * x1_hat + c.sigma * scaled, state.step + 1)
    eps = rng.standard_normal(state.x.shape)
    return ContinuousState(c.c1 * state.x + c.c2 * dest + c.sigma * eps, state.step + 1)


def destination_candidates_continuous(state: ContinuousState, core, objective, config: GuidanceConfig,
                                      K: int, rng: np.random.Generator, x1_hat=None,
                                      cost: Cost | None = None, history: list | None = None) -> list[Candidate]:
    """Iterated endpoint search around ``u(x_t)``; returns the final round as candidates.

    Rounds ``1..n_iter-1`` move the search point to the best of ``K``
    perturbations of width ``rho_t``.  The final round's ``K`` perturbations
    each become a candidate whose next state steps toward it (or, with
    ``dsg``, along its unit direction from ``u(x_t)`` rescaled to ``sqrt(D)``).
    With ``keep_best`` the incumbent takes part in every comparison and is
    offered as an extra candidate.
    """
    if x1_hat is None:
        x1_hat = core.predict(state)
        _tally(cost, model=1)
    rho = core.schedule.rho(state.step, config.rho_scale)
    x, x_val = x1_hat, None
    if config.keep_best:
        x_val = float(objective(x1_hat))
        _tally(cost, pred=1)
        if history is not None:
            history.append(x_val)
    for rnd in range(config.n_iter):
        pool = x + rho * rng.standard_normal((K, x1_hat.size))
        vals = np.asarray(objective(pool), dtype=np.float64).reshape(K)
        _tally(cost, pred=K)
        if history is not None:
            running = -np.inf if x_val is None else x_val
            for v in vals:
                running = max(running, v) if config.keep_best else v
                history.append(running)
        if rnd < config.n_iter - 1:
            k = int(np.argmax(vals))
            if not (config.keep_best and x_val is not None and x_val >= vals[k]):
                x, x_val = pool[k], float(vals[k])
    dests = list(pool)
    dvals = list(vals)
    if config.keep_best:
        dests.append(x)
        dvals.append(x_val)
    out = []
    for j, (dest, v) in enumerate(zip(dests, dvals)):
        nxt = _dsg_or_noise_step(state, core, x1_hat, dest, config.dsg, rng)
        out.append(Candidate(nxt, value=float(v), destination=np.asarray(dest), branch=j))
    return out


def select_best(cands: list[Candidate]) -> Candidate:
    """Highest value; ties go to the lowest index."""
    vals = np.array([c.value for c in cands])
    return cands[int(np.argmax(vals))]


def branch_out_destination_continuous(state: ContinuousState, core, objective, config: GuidanceConfig,
                                      K: int, rng: np.random.Generator, cost: Cost | None = None,
                                      history: list | None = None) -> Candidate:
    """Single-path destination branch-out: the best endpoint and the step toward it."""
    return select_best(destination_candidates_continuous(state, core, objective, config, K, rng,
                                                         cost=cost, history=history))


# ---------------------------------------------------------------------------
# discrete gradient machinery


def neighbor_posteriors(tokens, denoiser, S: int):
    """Denoiser outputs at every single-token unmasking of ``tokens``.

    Returns ``(dims, nb, ok)`` where ``nb[a, j]`` is the ``(D, S)`` output with
    masked dimension ``dims[a]`` set to ``j`` and ``ok[a, j]`` is False when
    that neighbour lies off the data support.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    dims = np.flatnonzero(tokens == S)
    D = tokens.shape[0]
    nb = np.zeros((dims.size, S, D, S))
    ok = np.zeros((dims.size, S), dtype=bool)
    for a, d in enumerate(dims):
        for j in range(S):
            t2 = tokens.copy()
            t2[d] = j
            try:
                nb[a, j] = denoiser(t2)
                ok[a, j] = True
            except OffSupportError:
                pass
    return dims, nb, ok


def _chain_to_input(dL: np.ndarray, probs: np.ndarray, dims, nb, ok, D: int, S: int) -> np.ndarray:
    """Push ``d F / d log u`` (masked rows) back to the one-hot input of ``x_t``.

    Uses the multilinear extension of the denoiser, whose Jacobian at a vertex
    is given by the neighbour outputs.  Mask columns and unmasked rows get 0.
    """
    u = probs[dims]
    Q = np.divide(dL, u, out=np.zeros_like(dL), where=u > 0)
    grad = np.zeros((D, S + 1))
    if dims.size:
        # nb[a, j][dims] has shape (n_m, S) per neighbour
        g = np.einsum("bs,ajbs->aj", Q, nb[:, :, dims, :])
        grad[dims, :S] = np.where(ok, g, 0.0)
    return grad


def conditional_gumbels(logits: np.ndarray, k: np.ndarray, M: int, rng: np.random.Generator) -> np.ndarray:
    """Perturbed logits ``logits + G`` drawn conditional on ``argmax == k``.

    ``logits`` has shape ``(n, S)`` and ``k`` shape ``(N, n)``; returns
    ``(M, N, n, S)``.  Uses the top-down construction: the maximum is
    ``log Z + Gumbel`` and every other coordinate is truncated below it.
    """
    N, n = k.shape
    S = logits.shape[-1]
    E = rng.exponential(size=(M, N, n, S))
    with np.errstate(divide="ignore"):
        logZ = np.logaddexp.reduce(logits, axis=-1)                   # (n,)
        Ek = np.take_along_axis(E, k[None, :, :, None], axis=-1)       # (M, N, n, 1)
        z = -np.log(E * np.exp(-logits) + Ek * np.exp(-logZ)[:, None])
    top = logZ - np.log(Ek[..., 0])
    np.put_along_axis(z, k[None, :, :, None], top[..., None], axis=-1)
    return z


def st_gumbel_gradient(state: DiscreteSequence, core, predictor, N: int, tau: float,
                       rng: np.random.Generator, probs=None, neighbors=None, n_rao: int = 0):
    """Straight-through Gumbel-softmax estimate of ``grad_{x_t} E f(x1_hat)``.

    Forward: ``N`` hard endpoints by Gumbel-max on the denoiser log-probs.
    Backward: the predictor gradient at each hard endpoint is copied onto the
    tempered softmax relaxation and chained through the denoiser to the
    one-hot encoding of ``x_t``.  With ``n_rao > 0`` the softmax Jacobian of
    each hard draw is averaged over ``n_rao`` Gumbel vectors resampled
    conditional on the same argmax, which keeps the forward pass and lowers
    the variance.  Returns a ``(D, S+1)`` array (last column is the mask
    state) and the forward Monte-Carlo value.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    S, D = core.S, core.D
    tokens = np.asarray(state.tokens)
    if probs is None:
        probs = core.predict(state)
    if neighbors is None:
        neighbors = neighbor_posteriors(tokens, core.denoiser, S)
    dims, nb, ok = neighbors
    with np.errstate(divide="ignore"):
        logu = np.log(probs[dims])                                # (n_m, S)
    z = logu[None] + rng.gumbel(size=(N, dims.size, S))
    hard = np.repeat(tokens[None], N, axis=0)
    k = np.argmax(z, axis=-1)
    hard[:, dims] = k
    H = one_hot(hard, S)
    value = float(np.mean(predictor.evaluate(H)))
    if dims.size == 0:
        return np.zeros((D, S + 1)), value
    gh = np.asarray(predictor.gradient(H))[:, dims, :]           # copied onto the soft sample
    if n_rao > 0:
        y = softmax(conditional_gumbels(logu, k, n_rao, rng) / tau, axis=-1)
        inner = np.sum(gh[None] * y, axis=-1, keepdims=True)
        dL = np.mean(y * (gh[None] - inner), axis=(0, 1)) / tau
    else:
        y = softmax(z / tau, axis=-1)                            # (N, n_m, S)
        inner = np.sum(gh * y, axis=-1, keepdims=True)
        dL = np.mean(y * (gh - inner), axis=0) / tau
    return _chain_to_input(dL, probs, dims, nb, ok, D, S), value


def expected_value_gradient(state: DiscreteSequence, core, predictor, probs=None, neighbors=None) -> np.ndarray:
    """Exact gradient of ``E f(x1_hat)`` w.r.t. the one-hot input of ``x_t``.

    The denoiser enters through its row-normalised multilinear extension; the
    expectation is enumerated over the masked coordinates, so this is only
    for small problems.  Shape ``(D, S+1)``.
    """
    S, D = core.S, core.D
    tokens = np.asarray(state.tokens)
    if probs is None:
        probs = core.predict(state)
    if neighbors is None:
        neighbors = neighbor_posteriors(tokens, core.denoiser, S)
    dims, nb, ok = neighbors
    grad = np.zeros((D, S + 1))
    if dims.size == 0:
        return grad
    # cond[b, s] = E[f | x1^(dims[b]) = s] with the other masked dims drawn from probs
    n = dims.size
    combos = np.array(list(itertools.product(range(S), repeat=n)), dtype=np.int64)
    seqs = np.repeat(tokens[None], combos.shape[0], axis=0)
    seqs[:, dims] = combos
    fvals = np.asarray(predictor.evaluate(one_hot(seqs, S)), dtype=np.float64).reshape(-1)
    w_rows = probs[dims[None, :], combos]                        # (n_combo, n)
    cond = np.zeros((n, S))
    for b in range(n):
        others = np.prod(np.delete(w_rows, b, axis=1), axis=1)
        for s in range(S):
            sel = combos[:, b] == s
            cond[b, s] = np.dot(others[sel], fvals[sel])
    u = probs[dims]
    for a in range(n):
        for j in range(S):
            if ok[a, j]:
                delta = nb[a, j][dims] - u
                grad[dims[a], j] = np.sum(delta * cond)
    return grad


def taylor_ratios(tokens, grad: np.ndarray) -> np.ndarray:
    """First-order log-ratios ``grad[d, j] - grad[d, x_t^(d)]``, shape ``(D, S)``.

    ``grad`` has ``S+1`` columns, the last one being the mask state.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    grad = np.asarray(grad, dtype=np.float64)
    S = grad.shape[1] - 1
    base = grad[np.arange(tokens.shape[0]), tokens]
    return grad[:, :S] - base[:, None]


def exact_ratios(state: DiscreteSequence, core, objective, N: int | None, rng: np.random.Generator | None,
                 cost: Cost | None = None) -> np.ndarray:
    """Log-ratios from Monte-Carlo values at every single-token neighbour.

    All neighbours reuse one block of uniforms (common random numbers), so a
    neighbour equal to ``x_t`` gets ratio exactly 0.  Off-support neighbours
    get ``-inf``.  Only masked rows are filled.  ``N=None`` uses exact
    enumeration instead of sampling.
    """
    S, D = core.S, core.D
    tokens = np.asarray(state.tokens)
    U = None if N is None else rng.random((N, D))
    base = mc_log_py(state, core, objective, N, None, cost, uniforms=U)
    out = np.zeros((D, S))
    for d in np.flatnonzero(tokens == S):
        for j in range(S):
            t2 = tokens.copy()
            t2[d] = j
            nbr = DiscreteSequence(t2, state.step, state.T)
            try:
                v = mc_log_py(nbr, core, objective, N, None, cost, uniforms=U)
            except OffSupportError:
                out[d, j] = -np.inf
                continue
            out[d, j] = v - base
    return out


def guided_rate(rates: RateSpec, ratios: np.ndarray, gamma: float) -> RateSpec:
    """Tilt rates by ``exp(gamma * ratio)``, exponent clipped to +-50."""
    if gamma == 0:
        return rates
    with np.errstate(invalid="ignore"):
        z = gamma * np.asarray(ratios, dtype=np.float64)
    z = np.clip(np.nan_to_num(z, nan=0.0), -RATIO_CLIP, RATIO_CLIP)
    return rates.scaled(np.exp(z))


def discrete_guided_rates(state: DiscreteSequence, core, predictor, objective, config: GuidanceConfig,
                          rng: np.random.Generator, probs=None, cost: Cost | None = None) -> RateSpec:
    """Gradient-tilted model rates for one parent (one backprop unit in Taylor mode)."""
    if probs is None:
        probs = core.predict(state)
    t = core.time(state.step)
    rates = core.rates(state, probs)
    if config.ratio_mode == "taylor":
        grad, _ = st_gumbel_gradient(state, core, predictor, config.n_mc, config.tau, rng, probs=probs,
                                     n_rao=config.n_rao)
        _tally(cost, backprop=1)
        ratios = taylor_ratios(state.tokens, grad)
    else:
        ratios = exact_ratios(state, core, objective, config.n_mc, rng, cost)
    return guided_rate(rates, ratios, config.gamma_at(t))


def gradient_step_discrete(state: DiscreteSequence, core, predictor, objective, config: GuidanceConfig,
                           rng: np.random.Generator, cost: Cost | None = None) -> Candidate:
    rates = discrete_guided_rates(state, core, predictor, objective, config, rng, cost=cost)
    return Candidate(euler_step(state, rates, core.dt, rng))


# ---------------------------------------------------------------------------
# continuous gradient guidance


def continuous_guidance_direction(state: ContinuousState, core, predictor, x1_hat=None, fd: bool = False):
    """``grad_{x_t} f(u(x_t))`` via the denoiser's vector-Jacobian product.

    Returns ``(g, x1_hat)``.  ``fd=True`` uses central differences instead.
    """
    if x1_hat is None:
        x1_hat = core.predict(state)
    cot = np.asarray(predictor.gradient(x1_hat), dtype=np.float64)
    vjp = getattr(core.denoiser, "vjp", None)
    if vjp is None or fd:
        from .continuous import finite_difference_vjp
        g = finite_difference_vjp(core.denoiser, state.x, state.step, cot)
    else:
        g = vjp(state.x, state.step, cot)
    return g, x1_hat


def guided_ddpm_step(state: ContinuousState, core, g, x1_hat, gamma: float, rng) -> ContinuousState:
    c = core.schedule.step_coeffs(state.step)
    eps = rng.standard_normal(state.x.shape)
    return ContinuousState(gamma * g + c.c1 * state.x + c.c2 * x1_hat + c.sigma * eps, state.step + 1)


def gradient_step_continuous(state: ContinuousState, core, predictor, gamma: float,
                             rng: np.random.Generator, cost: Cost | None = None) -> Candidate:
    """``x_{t+dt} = gamma g + c1 x_t + c2 u(x_t) + sigma eps`` with ``g = grad f(u(x_t))``."""
    g, x1_hat = continuous_guidance_direction(state, core, predictor)
    _tally(cost, backprop=1)
    return Candidate(guided_ddpm_step(state, core, g, x1_hat, gamma, rng))
