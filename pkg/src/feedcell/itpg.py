"""Index-table policy gradient.

Each device gets an index row mu(s_l, a) for a = 0..M from a shared network
(mu(s_l, 0) = 0 by construction). A joint allocation scores the sum of its
devices' entries, so the argmax under the budget sum(a) <= M and the softmax
normaliser over all feasible allocations are both budgeted dynamic programs
over devices, linear in L. Full enumeration is kept only as a test oracle.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .core import CellConfig, CellState, cycle_energy, initial_state, sample_all_channels, step
from .mdp import enumerate_actions, shaped_rewards, SHAPING_RHO
from .nn import Adam, Mlp, masked_softmax
from .pruning import eligibility_masks

log = logging.getLogger(__name__)

N_FEATURES = 3


def device_features(cfg: CellConfig, state: CellState) -> np.ndarray:
    """(L, 3) normalised per-device inputs: E/rho, |h|^2/sigma^2, |h~|^2/sigma~^2."""
    rho = np.maximum(np.asarray(cfg.rho), 1e-300)
    return np.stack([state.energy / rho, state.h2 / np.asarray(cfg.sigma2),
                     state.h2_fb / np.asarray(cfg.sigma2_fb)], axis=1)


class IndexNet:
    """Shared per-device index network, 3 -> hidden -> M.

    The index of device l is w_l * f(s_l) with f the network output and
    w_l = exp(urgency * (mean_E - E_l)) (energies in units of rho), so
    devices with less charge left weigh more. The common factor across
    devices cancels in the argmax and keeps the softmax well scaled;
    urgency = 0 gives the plain network.
    """

    def __init__(self, M: int, hidden=(64, 64), rng: np.random.Generator | None = None, mlp: Mlp | None = None,
                 urgency: float = 0.0):
        if M < 1:
            raise ValueError("IndexNet needs M >= 1")
        if urgency < 0 or not math.isfinite(urgency):
            raise ValueError("urgency must be finite and >= 0")
        self.M = M
        self.urgency = float(urgency)
        self.mlp = Mlp((N_FEATURES, *hidden, M), rng) if mlp is None else mlp
        if self.mlp.widths[0] != N_FEATURES or self.mlp.widths[-1] != M:
            raise ValueError("network widths do not match (3 inputs, M outputs)")

    def weights(self, feats) -> np.ndarray:
        """Per-device urgency weights, shape feats.shape[:-1]."""
        e = np.asarray(feats, dtype=float)[..., 0]
        if self.urgency == 0 or e.ndim == 0:
            return np.ones_like(e)
        return np.exp(self.urgency * (e.mean(axis=-1, keepdims=True) - e))

    def raw(self, feats) -> np.ndarray:
        feats = np.asarray(feats, dtype=float)
        return self.mlp(feats.reshape(-1, N_FEATURES)).reshape(*feats.shape[:-1], self.M)

    def rows(self, feats) -> np.ndarray:
        """Index rows with the a = 0 column fixed at zero, shape (..., M+1)."""
        out = self.raw(feats) * self.weights(feats)[..., None]
        return np.concatenate([np.zeros(out.shape[:-1] + (1,)), out], axis=-1)

    def copy(self):
        return IndexNet(self.M, mlp=self.mlp.copy(), urgency=self.urgency)


@dataclass
class IndexTable:
    """Per-device index rows plus eligibility masks.

    With `literal_zero` the masked entries are scored as 0 and stay feasible;
    by default they are removed from the feasible set.
    """

    rows: np.ndarray
    mask: np.ndarray
    literal_zero: bool = False

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.rows.shape != self.mask.shape or self.rows.ndim != 2:
            raise ValueError("rows and mask must both be (L, M+1)")
        if np.any(self.rows[:, 0] != 0):
            raise ValueError("index entry for a = 0 must be 0")
        if not self.mask[:, 0].all():
            raise ValueError("a = 0 must always be allowed")

    @property
    def L(self):
        return self.rows.shape[0]

    @property
    def M(self):
        return self.rows.shape[1] - 1

    def effective(self) -> np.ndarray:
        """Rows as used by the argmax/softmax: masked entries -inf (or 0)."""
        return np.where(self.mask, self.rows, 0.0 if self.literal_zero else -np.inf)

    def feasible(self, a) -> bool:
        a = tuple(a)
        if len(a) != self.L or min(a) < 0 or sum(a) > self.M:
            return False
        return self.literal_zero or all(self.mask[l, k] for l, k in enumerate(a))

    def joint_score(self, a) -> float:
        """Sum of the entries, accumulated from the last device (same order as the DP)."""
        eff = self.effective()
        s = 0.0
        for l in reversed(range(self.L)):
            s = eff[l, a[l]] + s
        return s


def build_index_table(net: IndexNet, state: CellState, cfg: CellConfig, literal_zero=False, code=None) -> IndexTable:
    rows = net.rows(device_features(cfg, state))
    return IndexTable(rows, eligibility_masks(cfg, state.h2, state.h2_fb, code), literal_zero)


# ---------------------------------------------------------------------------
# budgeted argmax
# ---------------------------------------------------------------------------

def _suffix_max(eff):
    L, M1 = eff.shape
    idx, ok = _tail_index(M1 - 1)
    V = np.zeros((L + 1, M1))
    for l in reversed(range(L)):
        # cand[b, k] = eff[l, k] + V[l+1, b-k] for k <= b
        V[l] = np.where(ok, eff[l][None, :] + V[l + 1][idx], -np.inf).max(axis=1)
    return V


def best_action(table: IndexTable) -> tuple:
    """argmax of the joint score under sum(a) <= M; lexicographically smallest on ties."""
    eff = table.effective()
    V = _suffix_max(eff)
    b = table.M
    a = []
    for l in range(table.L):
        cand = eff[l, :b + 1] + V[l + 1, b::-1]
        k = int(np.argmax(cand == V[l, b]))  # first maximiser
        a.append(k)
        b -= k
    return tuple(a)


def best_action_bruteforce(table: IndexTable) -> tuple:
    """Enumeration oracle for best_action (first maximiser in lexicographic order)."""
    best, best_s = None, -np.inf
    for a in enumerate_actions(table.L, table.M):
        if not table.feasible(a):
            continue
        s = table.joint_score(a)
        if best is None or s > best_s:
            best, best_s = a, s
    return best


# ---------------------------------------------------------------------------
# softmax over joint allocations
# ---------------------------------------------------------------------------

_TAIL_CACHE: dict = {}


def _tail_index(M):
    if M not in _TAIL_CACHE:
        b = np.arange(M + 1)[:, None]
        k = np.arange(M + 1)[None, :]
        _TAIL_CACHE[M] = (np.clip(b - k, 0, M), k <= b)
    return _TAIL_CACHE[M]


def _gather_tail(Znext, M):
    """G[s, b, k] = Znext[s, b-k] for k <= b, -inf otherwise."""
    idx, ok = _tail_index(M)
    return np.where(ok, Znext[:, idx], -np.inf)


def _logsumexp(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return (np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m).squeeze(axis)


def log_partition(x) -> np.ndarray:
    """Z[s, l, b] = log sum over allocations of devices l.. with budget b of exp(sum x).

    x has shape (S, L, M+1), already divided by the temperature.
    """
    S, L, M1 = x.shape
    Z = np.zeros((S, L + 1, M1))
    for l in reversed(range(L)):
        Z[:, l] = _logsumexp(x[:, l, None, :] + _gather_tail(Z[:, l + 1], M1 - 1), axis=2)
    return Z


def action_marginals(x, Z=None) -> np.ndarray:
    """P(a_l = k) under the joint softmax, shape (S, L, M+1)."""
    S, L, M1 = x.shape
    M = M1 - 1
    Z = log_partition(x) if Z is None else Z
    used = np.zeros((S, M1))
    used[:, 0] = 1.0
    marg = np.zeros((S, L, M1))
    u = np.arange(M1)[:, None]
    k = np.arange(M1)[None, :]
    ok = u + k <= M
    rem_after = np.clip(M - u - k, 0, M)
    rem = M - np.arange(M1)
    for l in range(L):
        with np.errstate(invalid="ignore"):
            logp = x[:, l, None, :] + Z[:, l + 1][:, rem_after] - Z[:, l][:, rem][:, :, None]
        p = np.where(ok, np.exp(np.where(ok, logp, -np.inf)), 0.0) * used[:, :, None]
        marg[:, l] = p.sum(axis=1)
        nxt = np.zeros((S, M1))
        for d in range(M1):
            # new used budget d = u + k
            uu = np.arange(d + 1)
            nxt[:, d] = p[:, uu, d - uu].sum(axis=1)
        used = nxt
    return marg


def log_prob(x, actions, Z=None) -> np.ndarray:
    """log pi(a) for a batch: x (S, L, M+1), actions (S, L)."""
    S, L, M1 = x.shape
    Z = log_partition(x) if Z is None else Z
    actions = np.asarray(actions)
    picked = np.take_along_axis(x, actions[:, :, None], axis=2)[:, :, 0]
    return picked.sum(axis=1) - Z[:, 0, M1 - 1]


def sample_action(table: IndexTable, rng: np.random.Generator, temperature=1.0, return_logp=False):
    """Draw from the joint softmax device by device using the partition DP."""
    x = table.effective()[None] / temperature
    Z = log_partition(x)[0]
    b = table.M
    a = []
    logp = 0.0
    for l in range(table.L):
        logits = x[0, l, :b + 1] + Z[l + 1, b::-1] - Z[l, b]
        p = np.exp(logits)
        c = np.cumsum(p)
        k = min(int(np.searchsorted(c, rng.random() * c[-1], side="right")), b)
        while p[k] == 0:  # never land on a zero-probability entry through rounding
            k -= 1
        logp += logits[k]
        a.append(k)
        b -= k
    return (tuple(a), logp) if return_logp else tuple(a)


def policy_probabilities(table: IndexTable, temperature=1.0):
    """(actions, probabilities) over every allocation, by enumeration.

    Infeasible allocations are listed with probability exactly 0.
    """
    actions = enumerate_actions(table.L, table.M)
    scores = np.array([table.joint_score(a) for a in actions])
    feas = np.array([table.feasible(a) for a in actions])
    return actions, masked_softmax(np.where(feas, scores, 0.0), feas, temperature)


def per_device_reward(energy: float, L: int) -> float:
    """1/L while the device still has charge."""
    return 1.0 / L if energy > 0 else 0.0


# ---------------------------------------------------------------------------
# policy
# ---------------------------------------------------------------------------

class ItpgPolicy:
    """Greedy (or sampled) allocation from an index network."""

    def __init__(self, net: IndexNet, cfg: CellConfig, literal_zero=False, stochastic=False, temperature=1.0):
        if net.M != cfg.M:
            raise ValueError("index net width does not match cfg.M")
        self.net, self.cfg = net, cfg
        self.literal_zero, self.stochastic, self.temperature = literal_zero, stochastic, temperature
        self.forward_code = cfg.forward_code
        self.name = "itpg"

    def table(self, state: CellState) -> IndexTable:
        return build_index_table(self.net, state, self.cfg, self.literal_zero, self.forward_code)

    def decide(self, state, rng=None):
        t = self.table(state)
        if self.stochastic:
            return sample_action(t, np.random.default_rng() if rng is None else rng, self.temperature)
        return best_action(t)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class ItpgConfig:
    batch_episodes: int = 16
    lr: float = 1e-4
    temperature: float = 0.05
    temperature_final: float | None = None  # geometric annealing over the episodes if set
    hidden: tuple = (64, 64)
    shaping_rho: float = SHAPING_RHO
    method: str = "reinforce"  # or "ppo"
    ppo_clip: float = 0.2
    ppo_epochs: int = 4
    literal_zero: bool = False
    normalize_advantage: bool = True
    grad_clip: float = 10.0
    # episodes per group sharing the same channel realisation; the baseline for
    # an episode is the mean of the other group members (leave-one-out)
    group_size: int = 4
    max_cycles: int = 100_000
    time_limit: float | None = None  # seconds
    urgency: float = 128.0
    # supervised warm start of the index net on per-cycle energy savings
    warm_start_samples: int = 20_000
    warm_start_steps: int = 3000


@dataclass
class Rollout:
    feats: np.ndarray    # (T, L, 3)
    masks: np.ndarray    # (T, L, M+1)
    actions: np.ndarray  # (T, L)
    logp: np.ndarray     # (T,)

    @property
    def T(self):
        return len(self.actions)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (update, episodes, mean T, mean shaped return, seconds)


def rollout(net: IndexNet, cfg: CellConfig, rng: np.random.Generator, tcfg: ItpgConfig,
            channel_rng: np.random.Generator | None = None) -> Rollout:
    """One sampled episode; channels come from `channel_rng` (defaults to `rng`)."""
    crng = rng if channel_rng is None else channel_rng
    state = initial_state(cfg, crng)
    feats, masks, acts, logps = [], [], [], []
    while not state.terminal and len(acts) < tcfg.max_cycles:
        f = device_features(cfg, state)
        table = IndexTable(net.rows(f), eligibility_masks(cfg, state.h2, state.h2_fb, cfg.forward_code),
                           tcfg.literal_zero)
        a, lp = sample_action(table, rng, tcfg.temperature, return_logp=True)
        logps.append(float(lp))
        feats.append(f)
        masks.append(table.mask)
        acts.append(a)
        state = step(cfg, state, a, sample_all_channels(cfg, crng), code=cfg.forward_code)
    L, M1 = cfg.L, cfg.M + 1
    return Rollout(np.array(feats).reshape(-1, L, N_FEATURES), np.array(masks).reshape(-1, L, M1),
                   np.array(acts, dtype=int).reshape(-1, L), np.array(logps))


def _clone(g: np.random.Generator) -> np.random.Generator:
    """Independent generator replaying g's stream."""
    c = np.random.Generator(type(g.bit_generator)())
    c.bit_generator.state = g.bit_generator.state
    return c


def returns_to_go(T: int, rho: float) -> np.ndarray:
    if T == 0:
        return np.zeros(0)
    r = shaped_rewards(T, rho)
    return np.cumsum(r[::-1])[::-1]


def advantages(rollouts, tcfg: ItpgConfig, groups=None):
    """Return-to-go minus a time-indexed mean baseline (returns are zero past an episode's end).

    Without `groups` the baseline is the batch mean. With groups (lists of
    rollout indices sharing a channel realisation) each episode is compared
    with the mean of the other members of its group.
    """
    G = [returns_to_go(r.T, tcfg.shaping_rho) for r in rollouts]
    H = max((len(g) for g in G), default=0)
    padded = np.zeros((len(G), H))
    for i, g in enumerate(G):
        padded[i, :len(g)] = g
    base = np.broadcast_to(padded.mean(axis=0), padded.shape).copy()
    for grp in groups or []:
        grp = list(grp)
        if len(grp) > 1:
            tot = padded[grp].sum(axis=0)
            base[grp] = (tot[None, :] - padded[grp]) / (len(grp) - 1)
    adv = [g - base[i, :len(g)] for i, g in enumerate(G)]
    flat = np.concatenate(adv) if adv else np.zeros(0)
    if tcfg.normalize_advantage and flat.size > 1 and flat.std() > 0:
        flat = (flat - flat.mean()) / flat.std()
    return flat, float(np.mean([g[0] if len(g) else 0.0 for g in G]))


def _policy_terms(net: IndexNet, feats, masks, actions, tcfg: ItpgConfig):
    """Forward pass over a batch of steps; returns (cache, x, logp, dlogp/dx)."""
    S, L, _ = feats.shape
    out, cache = net.mlp.forward_cache(feats.reshape(-1, N_FEATURES))
    w = net.weights(feats)
    rows = np.concatenate([np.zeros((out.shape[0], 1)), out], axis=1).reshape(S, L, -1) * w[:, :, None]
    eff = np.where(masks, rows, 0.0 if tcfg.literal_zero else -np.inf)
    x = eff / tcfg.temperature
    Z = log_partition(x)
    logp = log_prob(x, actions, Z)
    onehot = np.zeros_like(x)
    np.put_along_axis(onehot, actions[:, :, None], 1.0, axis=2)
    dx = onehot - action_marginals(x, Z)
    dx = np.where(masks, dx, 0.0)
    # chain rule through the urgency weight: d logp / d raw output
    return cache, x, logp, dx * w[:, :, None]


def _apply(net, opt, cache, coef, dx, tcfg):
    """Ascend sum_s coef[s] * logp[s]: push d/draw back through the net."""
    S, L, M1 = dx.shape
    dy = -(coef[:, None, None] * dx / tcfg.temperature)[:, :, 1:].reshape(S * L, M1 - 1)
    grads = net.mlp.backward(cache, dy)
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if not math.isfinite(norm):
        raise FloatingPointError("non-finite policy gradient")
    if tcfg.grad_clip and norm > tcfg.grad_clip:
        grads = [g * (tcfg.grad_clip / norm) for g in grads]
    opt.step(grads, tcfg.lr)
    if not net.mlp.is_finite():
        raise FloatingPointError("index network parameters became non-finite")
    return norm


def itpg_update(net: IndexNet, opt: Adam, rollouts, tcfg: ItpgConfig, groups=None):
    adv, mean_ret = advantages(rollouts, tcfg, groups)
    feats = np.concatenate([r.feats for r in rollouts])
    masks = np.concatenate([r.masks for r in rollouts])
    acts = np.concatenate([r.actions for r in rollouts])
    n = len(adv)
    if n == 0:
        return mean_ret
    if tcfg.method == "reinforce":
        cache, _, _, dx = _policy_terms(net, feats, masks, acts, tcfg)
        _apply(net, opt, cache, adv / n, dx, tcfg)
    elif tcfg.method == "ppo":
        old = np.concatenate([r.logp for r in rollouts])
        for _ in range(tcfg.ppo_epochs):
            cache, _, logp, dx = _policy_terms(net, feats, masks, acts, tcfg)
            ratio = np.exp(logp - old)
            # clipped surrogate: the gradient vanishes where the clip is active
            active = np.where(adv >= 0, ratio < 1 + tcfg.ppo_clip, ratio > 1 - tcfg.ppo_clip)
            _apply(net, opt, cache, np.where(active, adv * ratio, 0.0) / n, dx, tcfg)
    else:
        raise ValueError(f"unknown method {tcfg.method!r}")
    return mean_ret


def savings_targets(cfg: CellConfig, state: CellState, unit: float) -> np.ndarray:
    """(L, M) energy saved this cycle by a = 1..M relative to a = 0, in units of `unit`."""
    d = np.stack([cycle_energy(cfg, state.h2, state.h2_fb, np.full(state.L, a), cfg.forward_code)
                  for a in range(cfg.M + 1)], axis=1)
    return (d[:, :1] - d[:, 1:]) / unit


def savings_unit(cfg: CellConfig) -> float:
    """Mean per-cycle drain of device 0 without feedback."""
    from .power import forward_expected_power
    return max(forward_expected_power(cfg, 0) * cfg.tx_time + cfg.P_s * cfg.fb_time, 1e-300)


def warm_start(net: IndexNet, cfg: CellConfig, rng: np.random.Generator, samples=20_000, steps=3000,
               batch=256, lr=1e-3):
    """Regress the raw index outputs onto one-cycle energy savings.

    States are drawn with energies uniform on (0, rho) and fresh channels.
    Returns the mean squared error over the whole sample.
    """
    L = cfg.L
    n_states = max(1, samples // L)
    feats, targets = [], []
    rho = np.asarray(cfg.rho)
    unit = savings_unit(cfg)
    for _ in range(n_states):
        draws = sample_all_channels(cfg, rng)
        st = CellState(rng.uniform(0, 1, L) * rho, draws[0], draws[1])
        feats.append(device_features(cfg, st))
        targets.append(savings_targets(cfg, st, unit))
    X = np.concatenate(feats)
    Y = np.concatenate(targets)
    opt = Adam(net.mlp.params, lr=lr)
    for _ in range(steps):
        idx = rng.integers(0, len(X), batch)
        out, cache = net.mlp.forward_cache(X[idx])
        err = out - Y[idx]
        opt.step(net.mlp.backward(cache, 2.0 * err / err.size))
    if not net.mlp.is_finite():
        raise FloatingPointError("warm start diverged")
    return float(np.mean((net.mlp(X) - Y) ** 2))


def itpg_train(cfg: CellConfig, episodes: int, rng: np.random.Generator, tcfg: ItpgConfig | None = None,
               net: IndexNet | None = None, log_every: int = 10, callback=None):
    """Train an index network by policy gradient; returns (ItpgPolicy, TrainLog)."""
    tcfg = ItpgConfig() if tcfg is None else tcfg
    if cfg.M < 1:
        raise ValueError("nothing to allocate with M = 0")
    if net is None:
        net = IndexNet(cfg.M, tcfg.hidden, rng, urgency=tcfg.urgency)
        if tcfg.warm_start_steps > 0:
            mse = warm_start(net, cfg, rng, tcfg.warm_start_samples, tcfg.warm_start_steps)
            log.info("warm start mse %.4g", mse)
    opt = Adam(net.mlp.params, lr=tcfg.lr)
    tlog = TrainLog()
    done = update = 0
    t0 = time.perf_counter()
    while done < episodes:
        if tcfg.time_limit is not None and time.perf_counter() - t0 > tcfg.time_limit:
            log.info("time limit reached after %d episodes", done)
            break
        nb = min(tcfg.batch_episodes, episodes - done)
        if tcfg.temperature_final is not None:
            frac = done / max(1, episodes)
            cur = dataclasses.replace(tcfg, temperature=tcfg.temperature * (tcfg.temperature_final / tcfg.temperature) ** frac)
        else:
            cur = tcfg
        gs = max(1, tcfg.group_size)
        batch, groups = [], []
        for g0 in range(0, nb, gs):
            chan = rng.spawn(1)[0]
            members = []
            for child in rng.spawn(min(gs, nb - g0)):
                members.append(len(batch))
                batch.append(rollout(net, cfg, child, cur, channel_rng=_clone(chan)))
            groups.append(members)
        mean_ret = itpg_update(net, opt, batch, cur, groups)
        done += nb
        update += 1
        row = (update, done, float(np.mean([r.T for r in batch])), mean_ret, time.perf_counter() - t0)
        tlog.rows.append(row)
        if update % log_every == 0:
            log.info("update %d episodes %d mean T %.1f", *row[:3])
        if callback is not None:
            callback(net, row)
    return ItpgPolicy(net, cfg, literal_zero=tcfg.literal_zero), tlog
