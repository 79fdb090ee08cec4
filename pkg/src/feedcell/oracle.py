"""Quantized single-device MDP solved exactly by value iteration.

Energy lives on a uniform grid whose step is below the smallest per-cycle
drain, the two channel gains on equal-probability quantile grids. Costs are
rounded up to whole grid steps, which keeps every transition on the grid,
preserves the ordering of drains, and makes each step move strictly down in
energy. The solved tables are the reference for the structural checks
(monotone value, index monotone in a, index sign, safe pruning).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .core import CellConfig, cycle_energy
from .pruning import eligibility_masks, index_sign_quantity

MAX_STATES = 100_000


class NonConvergence(RuntimeError):
    pass


@dataclass(frozen=True)
class OracleGrids:
    n_energy: int = 1500
    n_h: int = 8
    n_fb: int = 8
    step_fraction: float = 0.25  # energy step as a fraction of the smallest drain


def exp_quantile_grid(mean: float, n: int):
    """Cell midpoints (in probability) of n equal-mass cells of Exp(mean); masses 1/n."""
    u = (np.arange(n) + 0.5) / n
    return -mean * np.log1p(-u), np.full(n, 1.0 / n)


@dataclass
class QuantizedSingleDeviceMDP:
    cfg: CellConfig
    energy: np.ndarray   # (K,) grid levels k * delta
    delta: float
    h2: np.ndarray       # (n_h,)
    p_h: np.ndarray
    h2_fb: np.ndarray    # (n_fb,)
    p_fb: np.ndarray
    drain: np.ndarray    # (n_h, n_fb, M+1) exact per-cycle energy
    cost: np.ndarray     # (n_h, n_fb, M+1) drain in grid steps, >= 1

    @property
    def M(self):
        return self.drain.shape[-1] - 1

    @property
    def n_states(self):
        return self.energy.size * self.h2.size * self.h2_fb.size

    @property
    def joint_mass(self):
        return self.p_h[:, None] * self.p_fb[None, :]


def build_quantized_oracle(cfg: CellConfig, grids: OracleGrids = OracleGrids(), device: int = 0,
                           code=None) -> QuantizedSingleDeviceMDP:
    if grids.n_energy * grids.n_h * grids.n_fb > MAX_STATES:
        raise ValueError(f"oracle grid exceeds {MAX_STATES} states")
    if cfg.L != 1:
        cfg = dataclasses.replace(cfg, L=1, alpha=cfg.alpha[device], sigma2=cfg.sigma2[device],
                                  sigma2_fb=cfg.sigma2_fb[device], rho=cfg.rho[device])
    h2, p_h = exp_quantile_grid(cfg.sigma2[0], grids.n_h)
    hf, p_fb = exp_quantile_grid(cfg.sigma2_fb[0], grids.n_fb)
    M = cfg.M
    drain = np.empty((grids.n_h, grids.n_fb, M + 1))
    for a in range(M + 1):
        H, F = np.meshgrid(h2, hf, indexing="ij")
        drain[:, :, a] = cycle_energy(cfg, H.ravel(), F.ravel(), np.full(H.size, a), code=code).reshape(H.shape)
    delta = grids.step_fraction * drain.min()
    cost = np.ceil(drain / delta).astype(np.int64)
    energy = delta * np.arange(grids.n_energy)
    return QuantizedSingleDeviceMDP(cfg, energy, delta, h2, p_h, hf, p_fb, drain, cost)


def value_iteration(oracle: QuantizedSingleDeviceMDP, tol: float = 1e-9, max_iter: int = 50):
    """Tabular q*(k, i, j, a) and v*(k, i, j) to sup-norm tolerance `tol`.

    Sweeps run in ascending energy (Gauss-Seidel); since every action lowers
    the energy by at least one step, the first sweep is already exact and the
    second one confirms it.
    """
    K = oracle.energy.size
    nh, nf, M1 = oracle.cost.shape
    w = oracle.joint_mass
    v = np.zeros((K, nh, nf))
    q = np.zeros((K, nh, nf, M1))
    ev = np.zeros(K)  # expected v over next channels at each level
    for it in range(1, max_iter + 1):
        change = 0.0
        for k in range(K):
            nxt = k - oracle.cost
            cont = np.where(nxt >= 0, ev[np.maximum(nxt, 0)], 0.0)  # negative energy: absorbing, value 0
            # every grid level has E >= 0, i.e. is non-terminal, and earns reward 1
            q[k] = 1.0 + cont
            vk = q[k].max(axis=2)
            change = max(change, float(np.abs(vk - v[k]).max()))
            v[k] = vk
            ev[k] = float(np.sum(w * vk))
        if change < tol:
            return q, v, it
    raise NonConvergence(f"value iteration did not reach tol={tol} in {max_iter} sweeps")


def index_oracle(q) -> np.ndarray:
    """mu(s, a) = q*(s, a) - q*(s, 0)."""
    return q - q[..., :1]


@dataclass
class OracleReport:
    n_states: int
    sweeps: int
    value_monotone: float    # fraction of (k, i, j) with v(k+1) >= v(k)
    index_monotone: float    # fraction of viable states with mu non-decreasing in a >= 1
    n_viable: int
    sign_agreement: float    # fraction of (state, a) where (mu <= 0) == (H <= 0)
    sign_weak: float         # fraction where mu has the sign H allows (H > 0 -> mu >= 0, else mu <= 0)
    pruning: float           # fraction of states where masked mu <= best kept mu + slack
    pruning_strict: float    # same without slack

    def passed(self, sign_min=0.95) -> bool:
        return (self.value_monotone == 1.0 and self.index_monotone == 1.0 and self.sign_agreement >= sign_min
                and self.pruning == 1.0)

    def lines(self):
        return [("value_monotone_in_energy", self.value_monotone, self.value_monotone == 1.0),
                ("index_monotone_in_a", self.index_monotone, self.index_monotone == 1.0),
                ("threshold_sign_agreement", self.sign_agreement, self.sign_agreement >= 0.95),
                ("pruning_safety", self.pruning, self.pruning == 1.0)]


def oracle_suite(cfg: CellConfig, grids: OracleGrids = OracleGrids(), tol: float = 1e-9, code=None) -> OracleReport:
    orc = build_quantized_oracle(cfg, grids, code=code)
    q, v, sweeps = value_iteration(orc, tol)
    mu = index_oracle(q)
    c = orc.cfg
    M = orc.M

    value_monotone = float(np.mean(v[1:] >= v[:-1])) if v.shape[0] > 1 else 1.0

    # per channel point: viability, the sign quantity H and the eligibility mask
    nh, nf = orc.h2.size, orc.h2_fb.size
    viable = np.zeros((nh, nf), dtype=bool)
    H = np.zeros((nh, nf, M + 1))
    mask = np.ones((nh, nf, M + 1), dtype=bool)
    for i, h in enumerate(orc.h2):
        for j, f in enumerate(orc.h2_fb):
            e_db = 10 * math.log10(c.alpha[0] * f * c.P_fb_max / c.N0)
            viable[i, j] = e_db >= c.fit.viability_db
            for a in range(1, M + 1):
                H[i, j, a] = index_sign_quantity(c, 0, h, f, a, code)
            mask[i, j] = eligibility_masks(c, np.array([h]), np.array([f]), code)[0]

    if M >= 2:
        mono = np.all(np.diff(mu[..., 1:], axis=-1) >= 0, axis=-1)  # (K, nh, nf)
        sel = np.broadcast_to(viable, mono.shape)
        index_monotone = float(mono[sel].mean()) if sel.any() else 1.0
        n_viable = int(sel.sum())
    else:
        index_monotone, n_viable = 1.0, int(viable.sum() * v.shape[0])

    if M >= 1:
        mu_a = mu[..., 1:]
        H_a = np.broadcast_to(H[None, :, :, 1:], mu_a.shape)
        sign_agreement = float(np.mean((mu_a <= 0) == (H_a <= 0)))
        sign_weak = float(np.mean(np.where(H_a > 0, mu_a >= 0, mu_a <= 0)))
    else:
        sign_agreement = sign_weak = 1.0

    # one energy step of value as slack
    slack = np.zeros_like(v)
    if v.shape[0] > 1:
        slack[:-1] = v[1:] - v[:-1]
        slack[-1] = slack[-2]
    m = np.broadcast_to(mask[None], mu.shape)
    kept_best = np.where(m, mu, -np.inf).max(axis=-1)
    dropped_best = np.where(m, -np.inf, mu).max(axis=-1)
    pruning = float(np.mean(dropped_best <= kept_best + slack))
    pruning_strict = float(np.mean(dropped_best <= kept_best))
    return OracleReport(orc.n_states, sweeps, value_monotone, index_monotone, n_viable, sign_agreement, sign_weak,
                        pruning, pruning_strict)
