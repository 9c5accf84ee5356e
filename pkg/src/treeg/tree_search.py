"""Active-set tree search over sampling paths, with cost accounting."""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .guidance import (
    Candidate,
    Cost,
    GuidanceConfig,
    branch_out_current,
    branch_out_destination_discrete,
    continuous_guidance_direction,
    destination_candidates_continuous,
    discrete_guided_rates,
    guided_ddpm_step,
    value_current,
)
from .discrete import euler_step
from .rng import stream


class ConfigurationError(ValueError):
    """Search settings that the engine cannot run."""


@dataclass
class StepRecord:
    step: int
    guided: bool
    values: np.ndarray          # candidate values, pool order (parent-major)
    parents: np.ndarray
    branches: np.ndarray
    selected: np.ndarray        # pool indices kept, best first


@dataclass
class SearchTrace:
    steps: list = field(default_factory=list)
    final_values: np.ndarray | None = None
    best_index: int = 0
    final_fy: float = float("nan")
    cost: Cost = field(default_factory=Cost)
    wall_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "steps": [
                {
                    "step": r.step,
                    "guided": r.guided,
                    "values": r.values.tolist(),
                    "parents": r.parents.tolist(),
                    "branches": r.branches.tolist(),
                    "selected": r.selected.tolist(),
                }
                for r in self.steps
            ],
            "final_values": None if self.final_values is None else self.final_values.tolist(),
            "best_index": self.best_index,
            "final_fy": self.final_fy,
            "cost": dict(zip(("model", "pred", "backprop"), self.cost.as_tuple())),
            "wall_s": self.wall_s,
        }


def _check(core, config: GuidanceConfig, A: int, K: int, predictor) -> None:
    if A < 1 or K < 1:
        raise ConfigurationError("A and K must be >= 1")
    if config.family == "gradient" and predictor is None:
        raise ConfigurationError("the gradient family needs a differentiable predictor")
    if config.family == "gradient" and core.kind == "discrete" and config.ratio_mode == "taylor" \
            and not hasattr(core.denoiser, "predict"):
        raise ConfigurationError("Taylor ratios need an enumerable denoiser")


def select_top(values: np.ndarray, parents: np.ndarray, branches: np.ndarray, A: int) -> np.ndarray:
    """Indices of the ``A`` best values; ties go to ascending ``(parent, branch)``."""
    v = np.where(np.isnan(values), -np.inf, values)
    order = np.lexsort((branches, parents, -v))
    return order[:A]


def _expand(core, objective, config: GuidanceConfig, K: int, predictor, seed: int,
            step: int, parent: int, state) -> tuple[list[Candidate], Cost]:
    """All candidates of one parent at one guided step, with the cost they incurred."""
    cost = Cost()
    fam = config.family
    N = None if core.kind == "continuous" else config.n_mc

    def value(cand, b):
        rng = stream(seed, "value", step, parent, b)
        cand.value = value_current(cand.next_state, core, objective, N, rng, cost)

    cands: list[Candidate] = []
    if fam == "sample-current":
        pre = core.predict(state)
        cost.add(model=1)
        for b in range(K):
            c = branch_out_current(state, core, stream(seed, "propose", step, parent, b), pre)
            value(c, b)
            cands.append(c)
    elif fam == "sample-destination":
        if core.kind == "continuous":
            cands = destination_candidates_continuous(
                state, core, objective, config, K, stream(seed, "refine", step, parent), cost=cost)
        else:
            probs = core.predict(state)
            cost.add(model=1)
            for b in range(K):
                cands.append(branch_out_destination_discrete(
                    state, core, objective, stream(seed, "propose", step, parent, b), probs, cost))
    elif fam == "gradient":
        grng = stream(seed, "grad", step, parent)
        gamma = config.gamma_at(step / core.T)
        if core.kind == "continuous":
            g, x1_hat = continuous_guidance_direction(state, core, predictor)
            cost.add(backprop=1)
            for b in range(K):
                nxt = guided_ddpm_step(state, core, g, x1_hat, gamma,
                                       stream(seed, "propose", step, parent, b))
                cands.append(Candidate(nxt))
        else:
            rates = discrete_guided_rates(state, core, predictor, objective, config, grng, cost=cost)
            for b in range(K):
                cands.append(Candidate(euler_step(state, rates, core.dt,
                                                  stream(seed, "propose", step, parent, b))))
        for b, c in enumerate(cands):
            value(c, b)
    else:
        raise ConfigurationError(f"family {fam!r} does not branch")
    for b, c in enumerate(cands):
        c.parent, c.branch = parent, b
    return cands, cost


def run_tree_search(core, objective, config: GuidanceConfig, A: int, K: int, seed: int,
                    predictor=None, workers: int | None = None, record: bool = True):
    """Run the search from the prior to ``t = 1``.

    Each guided step expands every active member into ``K`` candidates,
    scores them with the family's value function and keeps the global top
    ``A``.  Steps outside the guidance window (and every step of family
    ``"none"``) advance each member by one plain sampler step.  The returned
    sample maximises the objective over the final active set.

    ``workers > 1`` expands parents on a thread pool; every random draw is
    keyed by ``(seed, role, step, parent, branch)`` so the result is the same
    as the serial run.
    """
    _check(core, config, A, K, predictor)
    t0 = time.perf_counter()
    trace = SearchTrace()
    active = [core.prior(stream(seed, "init", i)) for i in range(A)]
    pool_exec = ThreadPoolExecutor(workers) if workers and workers > 1 else None
    try:
        for step in range(core.T):
            t = step / core.T
            guided = config.family != "none" and config.in_window(t)
            if not guided:
                new = []
                for i, s in enumerate(active):
                    pre = core.predict(s)
                    new.append(branch_out_current(s, core, stream(seed, "unguided", step, i), pre).next_state)
                trace.cost.add(model=len(active))
                active = new
                continue

            def job(i):
                return _expand(core, objective, config, K, predictor, seed, step, i, active[i])

            if pool_exec is None:
                results = [job(i) for i in range(len(active))]
            else:
                results = list(pool_exec.map(job, range(len(active))))
            cands = [c for cs, _ in results for c in cs]
            for _, c in results:
                trace.cost += c
            values = np.array([c.value for c in cands], dtype=np.float64)
            parents = np.array([c.parent for c in cands])
            branches = np.array([c.branch for c in cands])
            keep = select_top(values, parents, branches, A)
            if record:
                trace.steps.append(StepRecord(step, True, values, parents, branches, keep))
            active = [cands[k].next_state for k in keep]
    finally:
        if pool_exec is not None:
            pool_exec.shutdown()
    finals = [core.clean(s) for s in active]
    fvals = np.array([float(objective(x)) for x in finals])
    best = int(np.argmax(np.where(np.isnan(fvals), -np.inf, fvals)))
    trace.final_values = fvals
    trace.best_index = best
    trace.final_fy = float(fvals[best])
    trace.wall_s = time.perf_counter() - t0
    return finals[best], trace


def n_guided_steps(config: GuidanceConfig, T: int) -> int:
    if config.family == "none":
        return 0
    return sum(config.in_window(i / T) for i in range(T))


def predict_cost(config: GuidanceConfig, A: int, K: int, T: int, kind: str = "discrete") -> Cost:
    """Closed-form counters for a full run.

    Per guided step and active member:

    * sample-current: ``C_model + K (C_model + N C_pred)``
    * sample-destination, discrete: ``C_model + K C_pred``
    * sample-destination, continuous: ``C_model + (K n_iter + keep_best) C_pred``
    * gradient: ``K (C_model + N C_pred) + C_backprop``

    ``N`` is 1 for continuous cores (point estimate).  A backprop unit is one
    differentiable forward-and-backward pass, denoiser forward included.
    Unguided steps cost ``C_model`` per member; the final argmax is not counted.
    """
    if kind not in ("continuous", "discrete"):
        raise ValueError("kind must be 'continuous' or 'discrete'")
    if config.family == "gradient" and kind == "discrete" and config.ratio_mode == "exact":
        raise ValueError("exact-ratio cost depends on the number of masked tokens; it has no closed form")
    N = 1 if kind == "continuous" else config.n_mc
    g = n_guided_steps(config, T)
    u = T - g
    fam = config.family
    if fam in ("none",):
        per = (0, 0, 0)
    elif fam == "sample-current":
        per = (1 + K, K * N, 0)
    elif fam == "sample-destination":
        if kind == "continuous":
            per = (1, K * config.n_iter + int(config.keep_best), 0)
        else:
            per = (1, K, 0)
    else:
        per = (K, K * N, 1)
    return Cost(model=A * (per[0] * g + u), pred=A * per[1] * g, backprop=A * per[2] * g)


def budget_pairs(budget: int) -> list[tuple[int, int]]:
    """All ``(A, K)`` with ``A * K == budget`` and both powers of two, ``A`` ascending."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    out = []
    a = 1
    while a <= budget:
        if budget % a == 0 and (budget // a) & (budget // a - 1) == 0:
            out.append((a, budget // a))
        a *= 2
    if not out:
        raise ValueError(f"budget {budget} has no power-of-two factorisation")
    return out


def sweep_fixed_budget(core, objective, config: GuidanceConfig, budget: int, seeds,
                       predictor=None, workers: int | None = None) -> list[dict]:
    """Mean final objective and wall time for every power-of-two ``(A, K)`` split of ``budget``."""
    rows = []
    seeds = list(seeds)
    for A, K in budget_pairs(budget):
        fy, wall, mae = [], [], []
        for s in seeds:
            x, tr = run_tree_search(core, objective, config, A, K, s, predictor, workers, record=False)
            fy.append(tr.final_fy)
            wall.append(tr.wall_s)
            mae.append(objective.abs_error(x) if hasattr(objective, "abs_error") else float("nan"))
        fy = np.asarray(fy)
        rows.append({
            "budget": budget, "A": A, "K": K,
            "mean_fy": float(fy.mean()),
            "sd_fy": float(fy.std(ddof=1)) if fy.size > 1 else 0.0,
            "se_fy": float(fy.std(ddof=1) / np.sqrt(fy.size)) if fy.size > 1 else 0.0,
            "mean_mae": float(np.mean(mae)),
            "mean_wall_s": float(np.mean(wall)),
            "n": int(fy.size),
        })
    return rows


def frontier(rows: list[dict]) -> dict[int, dict]:
    """Best row per budget by mean objective (ties to the smaller ``A``)."""
    best: dict[int, dict] = {}
    for r in rows:
        b = r["budget"]
        if b not in best or r["mean_fy"] > best[b]["mean_fy"]:
            best[b] = r
    return best
