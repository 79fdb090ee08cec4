"""Which per-device allocations can be ruled out before building an index table.

An allocation a >= 1 is dominated by a = 0 when it leaves the device with less
energy after the cycle, i.e. when

    H(a) = min(eta_max, eta0) - min(eta_max, eta*(a)) - (G-1)/G (P_r - P_s) alpha |h|^2 / N0

is non-positive. The closed-form thresholds below invert the logistic surface
at the break-even point. All SNR comparisons are in linear units.
"""

from __future__ import annotations

import logging
import math

import numpy as np

from .core import CellConfig, _dl_snr_db, db_to_linear, forward_required_snr_db, required_ul_snr_db

log = logging.getLogger(__name__)


def _threshold(level_db, eta_fb_db, fit):
    """Real a at which the surface crosses `level_db`; allocations up to it are dominated.

    Returns +inf when every a is dominated and -inf when none is.
    """
    if level_db - fit.u5 <= 0:
        log.debug("level %.3f dB at or below the surface floor: masking all a >= 1", level_db)
        return math.inf
    arg = 1.0 / (level_db - fit.u5) - fit.u4
    if arg <= 0:
        # level above the surface ceiling, every a >= 1 beats it
        return -math.inf
    slope = fit.u1 + fit.u2 * eta_fb_db
    if slope <= 0:
        return math.inf
    return (math.log(arg) - fit.u3 - fit.u0 * eta_fb_db) / slope


def rx_penalty_snr(cfg: CellConfig, device, h2):
    """(G-1)/G (P_r - P_s) alpha |h|^2 / N0: receive cost expressed as UL SNR."""
    return (cfg.G - 1) / cfg.G * (cfg.P_r - cfg.P_s) * np.asarray(cfg.alpha)[device] * h2 / cfg.N0


def index_sign_quantity(cfg: CellConfig, device: int, h2, h2_fb, a, code=None):
    """H(a) for real-valued a >= 1 (positive means a beats forward coding)."""
    eta_max = cfg.alpha[device] * h2 * cfg.P_max / cfg.N0
    eta0 = float(db_to_linear(forward_required_snr_db(cfg, code)))
    e_db = float(_dl_snr_db(cfg, h2_fb, cfg.alpha[device]))
    eta_a = float(db_to_linear(required_ul_snr_db(e_db, a, cfg.fit)))
    return min(eta_max, eta0) - min(eta_max, eta_a) - rx_penalty_snr(cfg, device, h2)


def allocation_thresholds(cfg: CellConfig, device: int, h2, h2_fb, code=None):
    """(a_th, a'_th) closed forms; the one not applicable to this state is nan."""
    fit = cfg.fit
    eta_max = cfg.alpha[device] * h2 * cfg.P_max / cfg.N0
    eta0 = float(db_to_linear(forward_required_snr_db(cfg, code)))
    e_db = float(_dl_snr_db(cfg, h2_fb, cfg.alpha[device]))
    if eta0 <= eta_max:
        eta_p = eta0 - rx_penalty_snr(cfg, device, h2)
        if eta_p <= 0:
            log.debug("eta' non-positive: masking all a >= 1")
            return math.inf, math.nan
        return _threshold(10 * math.log10(eta_p), e_db, fit), math.nan
    if eta_max <= 0:
        return math.nan, math.inf
    return math.nan, _threshold(10 * math.log10(eta_max), e_db, fit)


def eligibility_mask(cfg: CellConfig, device: int, h2, h2_fb, code=None) -> np.ndarray:
    """Boolean array over a = 1..M: True where the allocation may be considered."""
    M = cfg.M
    allowed = np.ones(M, dtype=bool)
    if M == 0:
        return allowed
    fit = cfg.fit
    e_db = float(_dl_snr_db(cfg, h2_fb, cfg.alpha[device]))
    if e_db < fit.viability_db:
        allowed[:] = False
        return allowed
    eta_max = cfg.alpha[device] * h2 * cfg.P_max / cfg.N0
    # condition 1: even the full budget cannot get under the P_max ceiling
    if float(db_to_linear(required_ul_snr_db(e_db, M, fit))) >= eta_max:
        allowed[:] = False
        return allowed
    a_th, a_th_prime = allocation_thresholds(cfg, device, h2, h2_fb, code)
    th = a_th if not math.isnan(a_th) else a_th_prime
    if th == math.inf:
        allowed[:] = False
    elif th >= 1:
        allowed[: min(M, int(math.floor(th)))] = False
    return allowed


def eligibility_masks(cfg: CellConfig, h2, h2_fb, code=None) -> np.ndarray:
    """(L, M+1) boolean table; column 0 (no feedback) is always allowed.

    Vectorised over devices and over any leading batch axes of h2, h2_fb
    (shape (..., L) gives (..., L, M+1)); agrees with eligibility_mask row by row.
    """
    L, M, fit = cfg.L, cfg.M, cfg.fit
    h2 = np.asarray(h2, dtype=float)
    out = np.ones(h2.shape + (M + 1,), dtype=bool)
    if M == 0:
        return out
    alpha = np.asarray(cfg.alpha)
    e_db = _dl_snr_db(cfg, h2_fb, alpha)
    eta_max = alpha * h2 * cfg.P_max / cfg.N0
    eta0 = float(db_to_linear(forward_required_snr_db(cfg, code)))
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        req_M = db_to_linear(required_ul_snr_db(np.maximum(e_db, fit.viability_db), M, fit))
        level = np.where(eta0 <= eta_max, eta0 - rx_penalty_snr(cfg, np.arange(L), h2), eta_max)
        level_db = 10 * np.log10(np.where(level > 0, level, 1.0))
        gap = level_db - fit.u5
        arg = 1.0 / np.where(gap > 0, gap, 1.0) - fit.u4
        slope = fit.u1 + fit.u2 * e_db
        th = (np.log(np.where(arg > 0, arg, 1.0)) - fit.u3 - fit.u0 * e_db) / np.where(slope > 0, slope, 1.0)
    th = np.where(arg <= 0, -np.inf, th)
    mask_all = ((e_db < fit.viability_db) | (req_M >= eta_max) | (level <= 0) | (gap <= 0)
                | (slope <= 0) | np.isnan(e_db))
    th = np.where(mask_all, np.inf, th)
    out[..., 1:] = np.arange(1, M + 1) > th[..., None]
    return out
