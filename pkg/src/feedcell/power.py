"""Distribution of the uplink transmit power under Rayleigh fading.

With the phase compensated, the uncapped power factorises as

    P = U0 * V * S,   V = 1/|h|^2,   S = exp(U1 / (U2 * |h~|^2 ** U3 + u4))

so V carries the UL fade and S the feedback-SNR dependent part of the
required SNR. S lives on (1, exp(U1/u4)); after r = ln S the support becomes
(0, U1/u4). Densities are evaluated by adaptive quadrature over r, and a
Monte-Carlo estimator that goes through the core SNR model (not through the
constants here) serves as the independent check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from .core import CellConfig, db_to_linear, forward_required_snr_db, transmit_powers

LN10_OVER_10 = math.log(10.0) / 10.0
EPSREL = 1e-8
EPSABS = 1e-30


class QuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class PropConstants:
    U0: float
    U1: float
    U2: float
    U3: float
    u4: float  # carried along: it fixes the support of S

    def __post_init__(self):
        if min(self.U0, self.U1, self.U2, self.U3) <= 0:
            raise ValueError(f"constants must be positive, got {self}")

    @property
    def r_max(self) -> float:
        return self.U1 / self.u4


def prop_constants(cfg: CellConfig, device: int, a: int) -> PropConstants:
    if a < 1:
        raise ValueError("a must be >= 1")
    f = cfg.fit
    alpha = cfg.alpha[device]
    U3 = (f.u0 + f.u2 * a) / LN10_OVER_10
    log_U2 = U3 * math.log(alpha * cfg.P_fb_max / cfg.N0) + f.u1 * a + f.u3
    return PropConstants(U0=cfg.N0 / alpha * 10 ** (f.u5 / 10), U1=LN10_OVER_10,
                         U2=math.exp(log_U2), U3=U3, u4=f.u4)


def _log_r_density(t, pc: PropConstants, sigma2_fb):
    """log of the density of R = ln S at r = exp(t), r in (0, U1/u4)."""
    k = 1.0 / pc.U3
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        # log(U1/r - u4) without forming U1/r
        w = math.log(pc.U1) - t + np.log1p(-pc.u4 * np.exp(t) / pc.U1)
        return (math.log(pc.U1) - math.log(sigma2_fb) - math.log(pc.U3) - k * math.log(pc.U2)
                + (k - 1.0) * w - 2.0 * t - np.exp(k * (w - math.log(pc.U2))) / sigma2_fb)


def _r_median(pc: PropConstants, sigma2_fb):
    # S is decreasing in |h~|^2, so the median of R sits at the median fade
    return pc.U1 / (pc.U2 * (sigma2_fb * math.log(2.0)) ** pc.U3 + pc.u4)


def _quad(fn, lo, hi, what):
    out = integrate.quad(fn, lo, hi, epsrel=EPSREL, epsabs=EPSABS, limit=400, full_output=True)
    val, err, info = out[:3]
    if not np.isfinite(val):
        raise QuadratureError(f"{what}: non-finite result on [{lo}, {hi}]")
    # quad flags roundoff-limited results too; those are kept if the error estimate is small
    if len(out) > 3 and err > 1e-6 * max(abs(val), 1e-300):
        raise QuadratureError(f"{what}: no convergence on [{lo}, {hi}], value={val:.6g} "
                              f"abserr={err:.3g}, neval={info['neval']}: {out[3]}")
    return val


def integrate_over_r(g, pc: PropConstants, sigma2_fb, what="r-integral"):
    """Integral of g(r) * f_R(r) over (0, U1/u4), done in t = ln r and split at the median."""
    t_med = math.log(_r_median(pc, sigma2_fb))
    t_max = math.log(pc.r_max)

    def h(t):
        if t >= t_max:
            return 0.0
        lg = float(_log_r_density(t, pc, sigma2_fb))
        return g(math.exp(t)) * math.exp(lg + t) if lg + t > -745.0 else 0.0

    return _quad(h, -np.inf, t_med, what) + _quad(h, t_med, t_max, what)


def s_cdf(s, pc: PropConstants, sigma2_fb):
    s = np.asarray(s, dtype=float)
    out = np.where(s > math.exp(pc.r_max), 1.0, 0.0)
    inside = (s > 1.0) & (s <= math.exp(pc.r_max))
    r = np.log(np.where(inside, s, 2.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        x = np.power(np.maximum(pc.U1 / r - pc.u4, 0.0) / pc.U2, 1.0 / pc.U3)
    return np.where(inside, np.exp(-x / sigma2_fb), out)[()]


def s_pdf(s, pc: PropConstants, sigma2_fb):
    """Density of S; zero outside (1, exp(U1/u4))."""
    s = np.asarray(s, dtype=float)
    inside = (s > 1.0) & (s < math.exp(pc.r_max))
    r = np.log(np.where(inside, s, 2.0))
    r = np.where(r < pc.r_max, r, pc.r_max / 2)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        val = np.exp(_log_r_density(np.log(r), pc, sigma2_fb)) / np.where(inside, s, 1.0)
    return np.where(inside, np.nan_to_num(val), 0.0)[()]


def power_cdf(p: float, cfg: CellConfig, device: int, a: int) -> float:
    """P(uncapped power <= p)."""
    if p <= 0:
        return 0.0
    pc = prop_constants(cfg, device, a)
    c = pc.U0 / (cfg.sigma2[device] * p)
    return integrate_over_r(lambda r: math.exp(-c * math.exp(r)), pc, cfg.sigma2_fb[device],
                            what=f"power_cdf(p={p:g})")


def power_pdf(p: float, cfg: CellConfig, device: int, a: int) -> float:
    """Density of the uncapped transmit power at p > 0."""
    if p <= 0:
        return 0.0
    pc = prop_constants(cfg, device, a)
    c = pc.U0 / (cfg.sigma2[device] * p)

    def g(r):
        x = c * math.exp(r)
        return x * math.exp(-x) / p

    return integrate_over_r(g, pc, cfg.sigma2_fb[device], what=f"power_pdf(p={p:g})")


def capped_mean_given_scale(c, sigma2, p_max):
    """E[min(p_max, c/X)] for X ~ Exp(mean sigma2)."""
    z = np.asarray(c, dtype=float) / (sigma2 * p_max)
    return p_max * -np.expm1(-z) + (c / sigma2) * special.exp1(z)


def expected_power(cfg: CellConfig, device: int, a: int) -> float:
    """Average capped transmit power with `a` >= 1 feedback subcarriers.

    The p-integral of min(p, P_max) against the V-part of the density is
    elementary (exponential integral), leaving one quadrature over r.
    """
    pc = prop_constants(cfg, device, a)
    s2 = cfg.sigma2[device]
    return integrate_over_r(lambda r: float(capped_mean_given_scale(pc.U0 * math.exp(r), s2, cfg.P_max)),
                            pc, cfg.sigma2_fb[device], what=f"expected_power(a={a})")


def forward_expected_power(cfg: CellConfig, device: int, code: str | None = None) -> float:
    """Average capped power of a conventional forward code (no feedback)."""
    eta0 = float(db_to_linear(forward_required_snr_db(cfg, code)))
    c = eta0 * cfg.N0 / cfg.alpha[device]
    return float(capped_mean_given_scale(c, cfg.sigma2[device], cfg.P_max))


def mc_expected_power(cfg: CellConfig, device: int, a: int, n: int, rng: np.random.Generator,
                      code: str | None = None, chunk: int = 1_000_000):
    """Monte-Carlo mean of the capped power and its standard error.

    a = 0 gives the forward-code baseline named by `code`.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    alpha = np.array([cfg.alpha[device]])
    total = total_sq = 0.0
    done = 0
    while done < n:
        m = min(chunk, n - done)
        h2 = rng.exponential(cfg.sigma2[device], m)
        h2_fb = rng.exponential(cfg.sigma2_fb[device], m)
        p = transmit_powers(cfg, h2, h2_fb, np.full(m, a), alpha=alpha, code=code)
        total += p.sum()
        total_sq += np.square(p).sum()
        done += m
    mean = total / n
    if n == 1:
        return float(mean), float("nan")
    var = max(total_sq / n - mean**2, 0.0) * n / (n - 1)
    return float(mean), float(math.sqrt(var / n))


def sample_uncapped_power(cfg: CellConfig, device: int, a: int, n: int, rng: np.random.Generator):
    """Draws of U0 * V * S straight from the channel distributions."""
    pc = prop_constants(cfg, device, a)
    h2 = rng.exponential(cfg.sigma2[device], n)
    h2_fb = rng.exponential(cfg.sigma2_fb[device], n)
    s = np.exp(pc.U1 / (pc.U2 * h2_fb**pc.U3 + pc.u4))
    return pc.U0 * s / h2, s


def power_reductions(cfg: CellConfig, device: int = 0, a_values=range(1, 6), codes=("polar", "turbo")):
    """Relative reduction of average power versus each forward code, per a."""
    base = {c: forward_expected_power(cfg, device, c) for c in codes}
    rows = []
    for a in a_values:
        ep = expected_power(cfg, device, a)
        rows.append((a, ep, {c: 1.0 - ep / base[c] for c in codes}))
    return base, rows


def histogram_tv(cfg: CellConfig, device: int, a: int, n: int, rng: np.random.Generator, bins: int = 60):
    """Total variation between sampled uncapped powers and the analytic law.

    Bins are log-spaced between the 0.1% and 99.9% sample quantiles plus two
    open tail bins; analytic bin masses come from power_cdf differences.
    """
    p, _ = sample_uncapped_power(cfg, device, a, n, rng)
    lo, hi = np.quantile(p, [1e-3, 1 - 1e-3])
    edges = np.geomspace(lo, hi, bins + 1)
    counts = np.bincount(np.searchsorted(edges, p), minlength=bins + 2) / n
    cdf = np.array([power_cdf(float(e), cfg, device, a) for e in edges])
    mass = np.diff(np.concatenate([[0.0], cdf, [1.0]]))
    return 0.5 * float(np.abs(counts - mass).sum())
