"""Lifespan MDP: action space, episodes, baseline allocation policies."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .core import CellConfig, CellState, check_allocation, initial_state, sample_all_channels, step
from .pruning import eligibility_masks

DEFAULT_ACTION_BUDGET = 200_000
SHAPING_RHO = 1.07


class ActionBudgetExceeded(RuntimeError):
    def __init__(self, L, M, size, budget):
        super().__init__(f"|A| = {size} for L={L}, M={M} exceeds the enumeration budget {budget}")
        self.L, self.M, self.size, self.budget = L, M, size, budget


def action_space_size(L: int, M: int) -> int:
    """Number of allocations with sum <= M over L devices, C(L+M, L)."""
    if L < 1 or M < 0:
        raise ValueError("need L >= 1 and M >= 0")
    n = math.comb(L + M, L)
    if n > np.iinfo(np.int64).max:
        raise OverflowError(f"|A| for L={L}, M={M} does not fit in 64 bits")
    return n


def enumerate_actions(L: int, M: int, budget: int = DEFAULT_ACTION_BUDGET) -> list[tuple]:
    """All feasible allocations in lexicographic order."""
    size = action_space_size(L, M)
    if size > budget:
        raise ActionBudgetExceeded(L, M, size, budget)
    out = []

    def rec(prefix, left, k):
        if k == 0:
            out.append(tuple(prefix))
            return
        for a in range(left + 1):
            prefix.append(a)
            rec(prefix, left - a, k - 1)
            prefix.pop()

    rec([], M, L)
    return out


@dataclass
class Trajectory:
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    final_state: CellState | None = None

    @property
    def T(self) -> int:
        return len(self.actions)

    def energy_trace(self) -> np.ndarray:
        """(T+1, L) energies at the start of each cycle, plus the terminal row."""
        rows = [s.energy for s in self.states]
        if self.final_state is not None:
            rows.append(self.final_state.energy)
        return np.array(rows)


class Policy(Protocol):
    def decide(self, state: CellState, rng: np.random.Generator | None = None) -> tuple: ...


def shaped_rewards(T: int, rho: float = SHAPING_RHO) -> np.ndarray:
    """Geometric per-cycle rewards whose sum is exactly T."""
    if T < 1 or rho <= 1:
        raise ValueError("need T >= 1 and rho > 1")
    t = np.arange(1, T + 1)
    # T (rho-1) rho^(t-1) / (rho^T - 1), written to avoid overflow for long episodes
    lr = math.log(rho)
    return T * (rho - 1.0) * np.exp((t - 1 - T) * lr) / -math.expm1(-T * lr)


def run_episode(policy, cfg: CellConfig, rng: np.random.Generator, max_cycles: int = 1_000_000,
                record_states: bool = True) -> Trajectory:
    """Simulate from full batteries until some device's energy goes negative."""
    code = getattr(policy, "forward_code", None)
    state = initial_state(cfg, rng)
    traj = Trajectory()
    while not state.terminal and traj.T < max_cycles:
        a = check_allocation(policy.decide(state, rng), cfg.L, cfg.M)
        if record_states:
            traj.states.append(state)
        traj.actions.append(a)
        traj.rewards.append(1.0)
        state = step(cfg, state, a, sample_all_channels(cfg, rng), code=code)
    traj.final_state = state
    return traj


@dataclass
class LifespanEstimate:
    mean: float
    ci_low: float
    ci_high: float
    std: float
    lifespans: np.ndarray

    @property
    def half_width(self):
        return (self.ci_high - self.ci_low) / 2


def estimate_lifespan(policy, cfg: CellConfig, episodes: int, rng: np.random.Generator) -> LifespanEstimate:
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    T = np.array([run_episode(policy, cfg, child, record_states=False).T for child in rng.spawn(episodes)],
                 dtype=float)
    mean = T.mean()
    std = T.std(ddof=1) if episodes > 1 else 0.0
    hw = 1.959963984540054 * std / math.sqrt(episodes)
    return LifespanEstimate(float(mean), float(mean - hw), float(mean + hw), float(std), T)


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

class NoFeedback:
    """Conventional forward coding for everybody: never allocates feedback."""

    def __init__(self, code="turbo"):
        self.forward_code = code
        self.name = f"nofeedback-{code}"

    def decide(self, state, rng=None):
        return (0,) * state.L


class Uniform:
    """floor(M/L) each, remainder handed out round-robin from device 0."""

    name = "uniform"

    def __init__(self, cfg: CellConfig):
        q, r = divmod(cfg.M, cfg.L)
        self._a = tuple(q + (1 if l < r else 0) for l in range(cfg.L))

    def decide(self, state, rng=None):
        return self._a


class GreedyMinEnergy:
    """Whole budget to the lowest-energy device that may receive M subcarriers."""

    name = "greedy"

    def __init__(self, cfg: CellConfig):
        self.cfg = cfg

    def decide(self, state, rng=None):
        a = [0] * state.L
        if self.cfg.M == 0:
            return tuple(a)
        allowed = eligibility_masks(self.cfg, state.h2, state.h2_fb)
        for l in np.argsort(state.energy, kind="stable"):
            if allowed[l, self.cfg.M]:
                a[l] = self.cfg.M
                break
        return tuple(a)


class RandomAllocation:
    """Uniform over the whole feasible action set."""

    name = "random"

    def __init__(self, cfg: CellConfig):
        self.actions = enumerate_actions(cfg.L, cfg.M)

    def decide(self, state, rng=None):
        rng = np.random.default_rng() if rng is None else rng
        return self.actions[rng.integers(len(self.actions))]


def baseline_policies(cfg: CellConfig) -> dict:
    pols = {f"nofeedback-{c}": NoFeedback(c) for c in sorted(cfg.forward_thresholds)}
    pols["uniform"] = Uniform(cfg)
    pols["greedy"] = GreedyMinEnergy(cfg)
    pols["random"] = RandomAllocation(cfg)
    return pols


def depletion_cycles(traj: Trajectory) -> np.ndarray:
    """Per-device cycle at which the battery runs out, extrapolated past the cell's end.

    Devices still holding energy when the cell dies are projected forward at
    their own average drain rate over the episode.
    """
    trace = traj.energy_trace()
    T = traj.T
    if T == 0:
        return np.zeros(trace.shape[1])
    final = trace[-1]
    rate = (trace[0] - final) / T
    return T + final / rate
