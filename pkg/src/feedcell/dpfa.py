"""Dynamic programming with a fitted q-network.

q(s, a) is approximated by an MLP on the concatenation of the normalised
cell state (3L numbers) and a one-hot code of the joint allocation (|A|
numbers). Targets come from the Bellman equation

    q(s, a) = 1(s not terminal) + E[ max_a' q_target(s', a') ]

with the expectation over next-cycle channels replaced by the mean over Kmc
sampled draws. The joint action set is enumerated, so the cost of one target
grows with Kmc * |A|; beyond the action budget training is refused.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .core import CellConfig, CellState, cycle_energy, initial_state, sample_all_channels, step
from .itpg import device_features
from .mdp import ActionBudgetExceeded, action_space_size, enumerate_actions, run_episode
from .nn import Adam, Mlp
from .pruning import eligibility_masks

log = logging.getLogger(__name__)

DPFA_ACTION_BUDGET = 20_000


@dataclass
class DpConfig:
    hidden: tuple = (128, 128)
    Kmc: int = 16
    lr: float = 1e-3
    batch_states: int = 32
    actions_per_state: int = 8     # allocations trained per sampled state (all of them if |A| is smaller)
    target_sync: int = 50          # gradient steps between target-network copies
    value_scale: float | None = None  # q is learnt as q / value_scale; default rho-based
    epsilon: float = 0.1
    epsilon_decay: float = 0.995   # per rollout episode
    epsilon_min: float = 0.02
    warm_start_episodes: int = 20  # Monte-Carlo regression before bootstrapping
    warm_start_steps: int = 300
    buffer_size: int = 20_000
    prune: bool = False            # restrict max/argmax to eligible allocations
    # extra weight on the spread of residuals among the actions of one state: the
    # greedy choice only depends on q differences, which are small next to q itself
    contrast_weight: float = 100.0
    max_actions: int = DPFA_ACTION_BUDGET
    time_limit: float | None = None


def dp_cost(L: int, M: int, Kmc: int = 16) -> dict:
    """Network rows evaluated for one Bellman target and the q-net input width."""
    A = action_space_size(L, M)
    return {"L": L, "M": M, "actions": A, "rows_per_target": Kmc * A, "input_width": 3 * L + A}


class QNet:
    """MLP over [state features, one-hot(a)] with a fast path for all actions at once."""

    def __init__(self, cfg: CellConfig, actions, hidden=(128, 128), rng=None, mlp: Mlp | None = None):
        self.L = cfg.L
        self.actions = actions
        self.n_actions = len(actions)
        self.in_state = 3 * cfg.L
        self.mlp = Mlp((self.in_state + self.n_actions, *hidden, 1), rng) if mlp is None else mlp

    def copy(self):
        return QNet.__new__(QNet)._init_from(self)

    def _init_from(self, other):
        self.L, self.actions, self.n_actions, self.in_state = other.L, other.actions, other.n_actions, other.in_state
        self.mlp = other.mlp.copy()
        return self

    def encode(self, feats, a_idx):
        """Explicit input rows (n, 3L + |A|)."""
        feats = np.asarray(feats, dtype=float).reshape(len(a_idx), -1)
        x = np.zeros((len(a_idx), self.in_state + self.n_actions))
        x[:, :self.in_state] = feats
        x[np.arange(len(a_idx)), self.in_state + np.asarray(a_idx)] = 1.0
        return x

    def values(self, feats, a_idx):
        return self.mlp(self.encode(feats, a_idx))[:, 0]

    def all_values(self, feats):
        """q for every action at each of n states: (n, |A|).

        The one-hot block of the first layer is a row lookup, so the first
        layer is computed as state part + weight row instead of a full matmul.
        """
        feats = np.asarray(feats, dtype=float).reshape(-1, self.in_state)
        p = self.mlp.params
        h = (feats @ p[0][:self.in_state] + p[1])[:, None, :] + p[0][self.in_state:][None, :, :]
        h = np.maximum(h, 0.0)
        for i in range(1, self.mlp.n_layers):
            h = h @ p[2 * i] + p[2 * i + 1]
            if i < self.mlp.n_layers - 1:
                h = np.maximum(h, 0.0)
        return h[..., 0]


def _feature_rows(cfg, energy, h2, h2_fb):
    rho = np.maximum(np.asarray(cfg.rho), 1e-300)
    return np.concatenate([energy / rho, h2 / np.asarray(cfg.sigma2), h2_fb / np.asarray(cfg.sigma2_fb)], axis=-1)


class DpTrainer:
    def __init__(self, cfg: CellConfig, dcfg: DpConfig | None = None, rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.dcfg = DpConfig() if dcfg is None else dcfg
        A = action_space_size(cfg.L, cfg.M)
        if A > self.dcfg.max_actions:
            raise ActionBudgetExceeded(cfg.L, cfg.M, A, self.dcfg.max_actions)
        self.rng = np.random.default_rng() if rng is None else rng
        self.actions = enumerate_actions(cfg.L, cfg.M)
        self.action_array = np.array(self.actions, dtype=int)
        self.index = {a: i for i, a in enumerate(self.actions)}
        self.online = QNet(cfg, self.actions, self.dcfg.hidden, self.rng)
        self.target = self.online.copy()
        self.opt = Adam(self.online.mlp.params, lr=self.dcfg.lr)
        self.scale = self.dcfg.value_scale or self._default_scale()
        self.buffer: list = []
        self.steps = 0
        self.epsilon = self.dcfg.epsilon
        self.log: list = []

    def _default_scale(self):
        # roughly the lifespan in cycles when nobody uses feedback
        from .power import forward_expected_power
        c = self.cfg
        drain = max(forward_expected_power(c, l) * c.tx_time + c.P_s * c.fb_time for l in range(c.L))
        return max(1.0, float(min(c.rho)) / drain)

    # -- state handling ----------------------------------------------------

    def features(self, state: CellState):
        return device_features(self.cfg, state).T.reshape(-1)  # [E..., h2..., h2_fb...]

    def feasible_mask(self, h2, h2_fb):
        """(..., |A|) boolean mask of allocations allowed in the given channel state(s)."""
        h2 = np.asarray(h2, dtype=float)
        if not self.dcfg.prune:
            return np.ones(h2.shape[:-1] + (len(self.actions),), dtype=bool)
        m = eligibility_masks(self.cfg, h2, h2_fb)                    # (..., L, M+1)
        L = self.cfg.L
        picked = m[..., np.arange(L)[None, :], self.action_array]     # (..., |A|, L)
        return np.all(picked, axis=-1)

    def greedy_index(self, state: CellState, net: QNet | None = None) -> int:
        q = (self.online if net is None else net).all_values(self.features(state)[None])[0]
        q = np.where(self.feasible_mask(state.h2, state.h2_fb), q, -np.inf)
        return int(np.flatnonzero(q == q.max())[0])  # first maximiser = lexicographically smallest

    # -- Bellman target ----------------------------------------------------

    def next_energies(self, state: CellState, a_idx):
        """Energies after each allocation in a_idx: (n, L)."""
        a = self.action_array[a_idx]
        L = self.cfg.L
        n = len(a_idx)
        d = cycle_energy(self.cfg, np.broadcast_to(state.h2, (n, L)), np.broadcast_to(state.h2_fb, (n, L)), a)
        return state.energy[None, :] - d

    def bellman_targets(self, state: CellState, a_idx, rng=None, draws=None, value_fn=None):
        """Targets (in cycles) for several allocations at one state, sharing the next-channel draws.

        `draws` may be given as (h2, h2_fb) arrays of shape (Kmc, L); `value_fn`
        maps (energy (n, L), h2 (n, L), h2_fb (n, L)) to max_a' q values and
        defaults to the target network.
        """
        a_idx = np.atleast_1d(np.asarray(a_idx, dtype=int))
        if state.terminal:
            return np.zeros(len(a_idx))
        rng = self.rng if rng is None else rng
        if draws is None:
            K = self.dcfg.Kmc
            draws = (rng.exponential(np.asarray(self.cfg.sigma2), (K, self.cfg.L)),
                     rng.exponential(np.asarray(self.cfg.sigma2_fb), (K, self.cfg.L)))
        h2n, hfn = (np.asarray(d, dtype=float).reshape(-1, self.cfg.L) for d in draws)
        K = h2n.shape[0]
        En = self.next_energies(state, a_idx)                 # (n, L)
        n = len(a_idx)
        E = np.repeat(En, K, axis=0)                          # (n*K, L)
        H = np.tile(h2n, (n, 1))
        F = np.tile(hfn, (n, 1))
        alive = np.all(E >= 0, axis=1)
        v = np.zeros(n * K)
        if alive.any():
            fn = self.max_value if value_fn is None else value_fn
            v[alive] = fn(E[alive], H[alive], F[alive])
        return 1.0 + v.reshape(n, K).mean(axis=1)

    def max_value(self, E, H, F, net: QNet | None = None):
        """max over allocations of the (unscaled) target-network q at the given states."""
        net = self.target if net is None else net
        q = net.all_values(_feature_rows(self.cfg, E, H, F)) * self.scale
        if self.dcfg.prune:
            q = np.where(self.feasible_mask(H, F), q, -np.inf)
        return q.max(axis=1)

    # -- training ----------------------------------------------------------

    def _regress(self, feats, a_idx, y, group=None):
        """One Adam step on the mean squared error of scaled q.

        `group` labels rows that share a state (0..G-1); with contrast_weight > 0
        the within-group variance of the residuals is penalised as well.
        """
        x = self.online.encode(feats, a_idx)
        out, cache = self.online.mlp.forward_cache(x)
        err = out[:, 0] - y / self.scale
        g = (2.0 / len(y)) * err
        lam = self.dcfg.contrast_weight
        if lam > 0 and group is not None:
            group = np.asarray(group)
            n_g = group.max() + 1
            size = np.bincount(group, minlength=n_g)
            centred = err - (np.bincount(group, weights=err, minlength=n_g) / size)[group]
            g = g + lam * 2.0 * centred / (size[group] * n_g)
        grads = self.online.mlp.backward(cache, g[:, None])
        self.opt.step(grads)
        if not self.online.mlp.is_finite():
            raise FloatingPointError("q-network parameters became non-finite")
        return float(np.mean(err**2))

    def collect(self, episodes: int, rng):
        """epsilon-greedy rollouts of the current greedy policy into the replay buffer."""
        lifespans = []
        for child in rng.spawn(episodes):
            state = initial_state(self.cfg, child)
            states = []
            while not state.terminal:
                if child.random() < self.epsilon:
                    feas = np.flatnonzero(self.feasible_mask(state.h2, state.h2_fb))
                    i = int(feas[child.integers(len(feas))])
                else:
                    i = self.greedy_index(state)
                states.append((state, i))
                state = step(self.cfg, state, self.actions[i], sample_all_channels(self.cfg, child))
            T = len(states)
            lifespans.append(T)
            # remaining lifespan from each visited state, usable as a Monte-Carlo target
            self.buffer.extend((s, i, T - t) for t, (s, i) in enumerate(states))
            self.epsilon = max(self.dcfg.epsilon_min, self.epsilon * self.dcfg.epsilon_decay)
        if len(self.buffer) > self.dcfg.buffer_size:
            del self.buffer[: len(self.buffer) - self.dcfg.buffer_size]
        return lifespans

    def warm_start(self, rng):
        d = self.dcfg
        if d.warm_start_episodes <= 0:
            return
        saved = self.epsilon
        self.epsilon = 1.0  # uniform exploration for the Monte-Carlo pass
        self.collect(d.warm_start_episodes, rng)
        self.epsilon = saved
        for _ in range(d.warm_start_steps):
            pick = rng.integers(len(self.buffer), size=d.batch_states * 4)
            feats = np.array([self.features(self.buffer[j][0]) for j in pick])
            self._regress(feats, np.array([self.buffer[j][1] for j in pick]),
                          np.array([self.buffer[j][2] for j in pick], dtype=float))
        self.target = self.online.copy()

    def train_step(self, rng):
        d = self.dcfg
        pick = rng.integers(len(self.buffer), size=d.batch_states)
        feats, idx, ys, group = [], [], [], []
        A = len(self.actions)
        for gi, j in enumerate(pick):
            s, i, _ = self.buffer[j]
            if A <= d.actions_per_state:
                cand = np.arange(A)
            else:
                cand = np.unique(np.concatenate([[i], rng.integers(A, size=d.actions_per_state - 1)]))
            y = self.bellman_targets(s, cand, rng)
            f = self.features(s)
            feats.extend([f] * len(cand))
            idx.extend(cand)
            ys.extend(y)
            group.extend([gi] * len(cand))
        loss = self._regress(np.array(feats), np.array(idx), np.array(ys), np.array(group))
        self.steps += 1
        if self.steps % d.target_sync == 0:
            self.target = self.online.copy()
        return loss


@dataclass
class DpPolicy:
    trainer: DpTrainer
    name: str = "dpfa"
    forward_code: str = field(default=None)

    def __post_init__(self):
        if self.forward_code is None:
            self.forward_code = self.trainer.cfg.forward_code

    def decide(self, state, rng=None):
        return self.trainer.actions[self.trainer.greedy_index(state)]


def dp_train(cfg: CellConfig, iterations: int, rng: np.random.Generator, dcfg: DpConfig | None = None,
             episodes_per_iteration: int = 1, steps_per_iteration: int = 20, callback=None):
    """Fitted q-iteration with a target network; returns (DpPolicy, trainer).

    Each iteration adds on-policy episodes to the buffer and takes a few
    gradient steps on Bellman targets. Raises ActionBudgetExceeded when the
    joint action set is too large to enumerate.
    """
    trainer = DpTrainer(cfg, dcfg, rng)
    t0 = time.perf_counter()
    trainer.warm_start(rng)
    for it in range(1, iterations + 1):
        if trainer.dcfg.time_limit is not None and time.perf_counter() - t0 > trainer.dcfg.time_limit:
            log.info("time limit reached at iteration %d", it)
            break
        lifespans = trainer.collect(episodes_per_iteration, rng)
        losses = [trainer.train_step(rng) for _ in range(steps_per_iteration)]
        row = (it, float(np.mean(losses)), float(np.mean(lifespans)), time.perf_counter() - t0)
        trainer.log.append(row)
        if callback is not None:
            callback(trainer, row)
    return DpPolicy(trainer), trainer
