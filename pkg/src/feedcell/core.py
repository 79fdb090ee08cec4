"""Physical-layer abstraction of a feedback-coded IoT cell.

Everything here works on squared channel magnitudes and SNRs. The feedback
code itself is replaced by the logistic required-SNR surface, so a device's
behaviour in one cycle is fully described by (energy, |h|^2, |h~|^2) and the
number of feedback subcarriers it receives.

Powers share one arbitrary linear unit; N0 is given in dBm in config files and
converted with the convention 0 dBm -> 1e-3 of that unit.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


# ---------------------------------------------------------------------------
# unit conversions
# ---------------------------------------------------------------------------

def db_to_linear(x_db):
    return np.power(10.0, np.asarray(x_db, dtype=float) / 10.0)[()]


def linear_to_db(x):
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise ValueError("linear_to_db needs strictly positive input")
    return (10.0 * np.log10(x))[()]


def dbm_to_linear(x_dbm):
    """dBm -> the cell's linear power unit (1 unit = 1 W equivalent)."""
    return db_to_linear(np.asarray(x_dbm, dtype=float) - 30.0)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitConstants:
    """Coefficients u0..u5 of the logistic required-UL-SNR model."""

    u0: float
    u1: float
    u2: float
    u3: float
    u4: float
    u5: float

    def __post_init__(self):
        if not self.u2 > 0:
            raise ValueError("u2 must be positive (more DL SNR never hurts)")
        if not self.u4 > 0:
            raise ValueError("u4 must be positive")

    @property
    def viability_db(self) -> float:
        """DL SNR (dB) above which more subcarriers never raise the required SNR."""
        return -self.u1 / self.u2

    def as_tuple(self):
        return (self.u0, self.u1, self.u2, self.u3, self.u4, self.u5)


# K=48, R=1/3 fit (default) and the K=36, R=1/4 refit
FIT_DEFAULT = FitConstants(0.08, 0.5, 0.05, -2.65, 0.116, -1.22)
FIT_K36 = FitConstants(0.073, 0.4, 0.05, -1.92, 0.085, -1.8)
FIT_PRESETS = {"default": FIT_DEFAULT, "k36": FIT_K36}

# Forward-code gaps (dB) over the a=1 feedback code at 20 dB feedback SNR.
POLAR_GAP_DB = 3.1
TURBO_GAP_DB = 2.6
ANCHOR_FB_SNR_DB = 20.0


def _per_device(value, L, name):
    arr = np.broadcast_to(np.asarray(value, dtype=float), (L,)).copy()
    if arr.shape != (L,):
        raise ValueError(f"{name} must be a scalar or have length L={L}")
    return tuple(float(v) for v in arr)


@dataclass(frozen=True)
class CellConfig:
    L: int = 1
    M: int = 4
    K: int = 48
    N: int = 144
    R: float = 1.0 / 3.0
    kappa: int = 3
    G: int = 9
    Q: int = 8
    T_ofdm: float = 1.0
    N0: float = 1e-12
    alpha: tuple = (1e-5,)
    sigma2: tuple = (5.0,)
    sigma2_fb: tuple = (5.0,)
    P_max: float = 0.5
    P_fb_max: float = 4.0
    P_r: float = 0.5 * 4.0 / 135.0
    P_s: float = 0.5 * 4e-3 / 135.0
    rho: tuple = (1.0,)
    fit: FitConstants = FIT_DEFAULT
    forward_thresholds: dict = field(default_factory=dict)
    forward_code: str = "turbo"
    target_per: float = 1e-4

    def __post_init__(self):
        L = int(self.L)
        if L < 1:
            raise ValueError("L must be >= 1")
        if self.M < 0:
            raise ValueError("M must be >= 0")
        for name in ("alpha", "sigma2", "sigma2_fb", "rho"):
            object.__setattr__(self, name, _per_device(getattr(self, name), L, name))
        for name in ("alpha", "sigma2", "sigma2_fb"):
            if min(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        if min(self.rho) < 0:
            raise ValueError("rho must be non-negative")
        if self.N != 2 * self.Q * self.G:
            raise ValueError("N must equal 2*Q*G")
        if not math.isclose(self.R, self.K / self.N, rel_tol=1e-9):
            raise ValueError("R must equal K/N")
        if self.K % (2 * self.Q) or self.kappa != self.K // (2 * self.Q):
            raise ValueError("kappa must equal K/(2Q) and be integral")
        if not (0 <= self.P_s < self.P_r):
            raise ValueError("need 0 <= P_s < P_r")
        if not (self.P_max > 0 and self.P_fb_max > 0 and self.N0 > 0 and self.T_ofdm > 0):
            raise ValueError("P_max, P_fb_max, N0 and T_ofdm must be positive")
        if not self.forward_thresholds:
            object.__setattr__(self, "forward_thresholds", default_forward_thresholds(self.fit))
        if self.forward_code not in self.forward_thresholds:
            raise KeyError(f"unknown forward code {self.forward_code!r}")

    # energy spent per cycle per unit power, for the three activities
    @property
    def tx_time(self) -> float:
        return self.T_ofdm * self.Q * self.G

    @property
    def fb_time(self) -> float:
        return self.T_ofdm * self.Q * (self.G - 1)

    def resized(self, L: int, M: int | None = None) -> "CellConfig":
        """Same cell with L devices; per-device values must be homogeneous."""
        kw = {}
        for name in ("alpha", "sigma2", "sigma2_fb", "rho"):
            vals = getattr(self, name)
            if len(set(vals)) != 1:
                raise ValueError(f"cannot resize heterogeneous {name}")
            kw[name] = vals[0]
        return dataclasses.replace(self, L=L, M=self.M if M is None else M, **kw)

    def to_json_dict(self) -> dict:
        d = {
            "L": self.L, "M": self.M, "K": self.K, "N": self.N, "R": self.R,
            "kappa": self.kappa, "G": self.G, "Q": self.Q, "T_ofdm": self.T_ofdm,
            "N0_dbm": float(linear_to_db(self.N0)) + 30.0,
            "alpha": list(self.alpha), "sigma2": list(self.sigma2),
            "sigma2_fb": list(self.sigma2_fb), "P_max": self.P_max,
            "P_fb_max": self.P_fb_max, "P_r": self.P_r, "P_s": self.P_s,
            "rho": list(self.rho), "fit": dataclasses.asdict(self.fit),
            "forward_thresholds_db": dict(self.forward_thresholds),
            "forward_code": self.forward_code, "target_per": self.target_per,
        }
        return d


def default_forward_thresholds(fit: FitConstants = FIT_DEFAULT) -> dict:
    """eta*(0) in dB for Polar/Turbo, anchored on the a=1 surface at 20 dB."""
    anchor = required_ul_snr_db(ANCHOR_FB_SNR_DB, 1, fit)
    return {"polar": float(anchor + POLAR_GAP_DB), "turbo": float(anchor + TURBO_GAP_DB)}


# Chip currents ~135 mA / 4 mA / 4 uA scaled to P_max.
_P_R = 0.5 * 4.0 / 135.0
_P_S = 0.5 * 4e-3 / 135.0

# alpha/N0 ratio of the calibrated preset; puts the median feedback SNR near
# 20 dB and makes the P_max cap bind on ~10% of forward-coded cycles.
CALIBRATED_ALPHA = 7.5e-12
# initial energies giving ~200 cycles for NoFeedback(turbo) at L=1
TABLE1_RHO = 0.1964
CALIBRATED_RHO = 1770.0

PRESETS = {
    "table1": dict(alpha=1e-5, rho=TABLE1_RHO),
    "calibrated": dict(alpha=CALIBRATED_ALPHA, rho=CALIBRATED_RHO),
}


def preset(name: str = "calibrated", L: int = 1, M: int | None = None, **overrides) -> CellConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    kw = dict(L=L, M=4 if M is None else M, N0=float(dbm_to_linear(-90.0)),
              P_r=_P_R, P_s=_P_S, **base)
    kw.update(overrides)
    return CellConfig(**kw)


def config_from_dict(d: dict, base: CellConfig | None = None) -> CellConfig:
    """Build a CellConfig from a JSON-style dict (dB fields use _db/_dbm)."""
    d = dict(d)
    kw = {} if base is None else {f.name: getattr(base, f.name) for f in dataclasses.fields(base)}
    if "N0_dbm" in d:
        kw["N0"] = float(dbm_to_linear(d.pop("N0_dbm")))
    if "fit" in d:
        fit = d.pop("fit")
        kw["fit"] = FIT_PRESETS[fit] if isinstance(fit, str) else FitConstants(**fit)
        kw["forward_thresholds"] = {}  # re-anchored on the new surface unless given
    if "forward_thresholds_db" in d:
        kw["forward_thresholds"] = {k: float(v) for k, v in d.pop("forward_thresholds_db").items()}
    names = {f.name for f in dataclasses.fields(CellConfig)}
    unknown = set(d) - names
    if unknown:
        raise KeyError(f"unknown config fields: {sorted(unknown)}")
    kw.update(d)
    L = int(kw.get("L", 1))
    # per-device values from a base config of another size are re-broadcast
    for name in ("alpha", "sigma2", "sigma2_fb", "rho"):
        v = kw.get(name)
        if isinstance(v, tuple) and len(v) != L and len(set(v)) == 1:
            kw[name] = v[0]
    return CellConfig(**kw)


def load_config(path=None, preset_name: str = "calibrated") -> CellConfig:
    base = preset(preset_name)
    if path is None:
        return base
    with open(Path(path)) as fh:
        return config_from_dict(json.load(fh), base=base)


# ---------------------------------------------------------------------------
# state containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChannelDraw:
    h2: float
    h2_fb: float

    def __post_init__(self):
        if self.h2 < 0 or self.h2_fb < 0:
            raise ValueError("squared channel magnitudes must be non-negative")


@dataclass(frozen=True)
class DeviceState:
    energy: float
    channel: ChannelDraw


@dataclass
class CellState:
    """Joint state: per-device energy and channel arrays plus the cycle index."""

    energy: np.ndarray
    h2: np.ndarray
    h2_fb: np.ndarray
    cycle: int = 0

    @property
    def L(self) -> int:
        return len(self.energy)

    @property
    def terminal(self) -> bool:
        return bool(np.min(self.energy) < 0)

    @property
    def devices(self) -> list[DeviceState]:
        return [DeviceState(float(e), ChannelDraw(float(h), float(g)))
                for e, h, g in zip(self.energy, self.h2, self.h2_fb)]

    @classmethod
    def from_devices(cls, devices: Sequence[DeviceState], cycle: int = 0) -> "CellState":
        return cls(np.array([d.energy for d in devices], dtype=float),
                   np.array([d.channel.h2 for d in devices], dtype=float),
                   np.array([d.channel.h2_fb for d in devices], dtype=float), cycle)

    def copy(self) -> "CellState":
        return CellState(self.energy.copy(), self.h2.copy(), self.h2_fb.copy(), self.cycle)


Allocation = tuple  # per-device subcarrier counts


def check_allocation(a, L: int, M: int) -> tuple:
    a = tuple(int(x) for x in a)
    if len(a) != L:
        raise ValueError(f"allocation has {len(a)} entries, expected {L}")
    if min(a) < 0 or sum(a) > M:
        raise ValueError(f"allocation {a} violates 0 <= a_l, sum <= {M}")
    return a


@dataclass(frozen=True)
class EnergyBreakdown:
    et: float
    er: float
    es: float

    @property
    def total(self) -> float:
        return self.et + self.er + self.es


# ---------------------------------------------------------------------------
# SNR model
# ---------------------------------------------------------------------------

def dl_snr(cfg: CellConfig, device: int, h2_fb):
    """Linear feedback (downlink) SNR seen by `device`."""
    return cfg.alpha[device] * np.asarray(h2_fb, dtype=float) * cfg.P_fb_max / cfg.N0


def _dl_snr_db(cfg, h2_fb, alpha):
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(alpha * np.asarray(h2_fb, dtype=float) * cfg.P_fb_max / cfg.N0)


def required_ul_snr_db(eta_fb_db, a, fit: FitConstants = FIT_DEFAULT):
    """Required UL SNR (dB) of the feedback code with `a` >= 1 subcarriers."""
    a = np.asarray(a)
    if np.any(a < 1):
        raise ValueError("required_ul_snr_db is defined for a >= 1; use the forward threshold for a = 0")
    e = np.asarray(eta_fb_db, dtype=float)
    z = fit.u0 * e + fit.u1 * a + fit.u2 * e * a + fit.u3
    with np.errstate(over="ignore"):
        return (1.0 / (np.exp(z) + fit.u4) + fit.u5)[()]


def forward_required_snr_db(cfg: CellConfig, code: str | None = None) -> float:
    code = cfg.forward_code if code is None else code
    try:
        return cfg.forward_thresholds[code]
    except KeyError:
        raise KeyError(f"unknown forward code {code!r}; have {sorted(cfg.forward_thresholds)}") from None


def required_snr_db(cfg: CellConfig, h2_fb, a, alpha=None, code=None):
    """eta* in dB for arrays of allocations; a == 0 picks the forward code."""
    alpha = np.asarray(cfg.alpha if alpha is None else alpha, dtype=float)
    a = np.asarray(a)
    e = _dl_snr_db(cfg, h2_fb, alpha)
    fwd = forward_required_snr_db(cfg, code)
    a_safe = np.maximum(a, 1)
    with np.errstate(invalid="ignore"):
        fb = required_ul_snr_db(e, a_safe, cfg.fit)
    return np.where(a == 0, fwd, fb)[()]


def transmit_power(cfg: CellConfig, device: int, draw: ChannelDraw, a: int, code=None) -> float:
    """UL power meeting the required SNR, capped at P_max."""
    if a < 0:
        raise ValueError("a must be non-negative")
    return float(transmit_powers(cfg, np.array([draw.h2]), np.array([draw.h2_fb]), np.array([a]),
                                 alpha=np.array([cfg.alpha[device]]), code=code)[0])


def transmit_powers(cfg: CellConfig, h2, h2_fb, a, alpha=None, code=None) -> np.ndarray:
    """Vectorised transmit power for all devices. h2 == 0 transmits at P_max."""
    alpha = np.asarray(cfg.alpha if alpha is None else alpha, dtype=float)
    h2 = np.asarray(h2, dtype=float)
    eta = db_to_linear(required_snr_db(cfg, h2_fb, a, alpha=alpha, code=code))
    with np.errstate(divide="ignore"):
        p = eta * cfg.N0 / (alpha * h2)
    return np.minimum(cfg.P_max, np.where(h2 > 0, p, np.inf))


def energy_breakdown(cfg: CellConfig, P: float, a: int) -> EnergyBreakdown:
    if P < 0:
        raise ValueError("power must be non-negative")
    fb = a > 0
    return EnergyBreakdown(et=P * cfg.tx_time,
                           er=cfg.P_r * cfg.fb_time if fb else 0.0,
                           es=0.0 if fb else cfg.P_s * cfg.fb_time)


def cycle_energy(cfg: CellConfig, h2, h2_fb, a, code=None) -> np.ndarray:
    """Total energy drawn by each device in one cycle (vectorised)."""
    a = np.asarray(a)
    p = transmit_powers(cfg, h2, h2_fb, a, code=code)
    return p * cfg.tx_time + np.where(a > 0, cfg.P_r, cfg.P_s) * cfg.fb_time


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------

def sample_channels(cfg: CellConfig, device: int, rng: np.random.Generator) -> ChannelDraw:
    h2 = rng.exponential(cfg.sigma2[device])
    h2_fb = rng.exponential(cfg.sigma2_fb[device])
    return ChannelDraw(float(h2), float(h2_fb))


def sample_all_channels(cfg: CellConfig, rng: np.random.Generator):
    """(h2, h2_fb) arrays for every device; one independent Rayleigh draw each."""
    h2 = rng.exponential(np.asarray(cfg.sigma2))
    h2_fb = rng.exponential(np.asarray(cfg.sigma2_fb))
    return h2, h2_fb


def initial_state(cfg: CellConfig, rng: np.random.Generator) -> CellState:
    h2, h2_fb = sample_all_channels(cfg, rng)
    return CellState(np.array(cfg.rho, dtype=float), h2, h2_fb, 0)


def step(cfg: CellConfig, state: CellState, alloc, next_draws, code=None) -> CellState:
    """Advance one cycle.

    `next_draws` is either a list of ChannelDraw or an (h2, h2_fb) pair of
    arrays for the following cycle.
    """
    if state.terminal:
        raise ValueError("cannot step a terminal state")
    a = np.asarray(check_allocation(alloc, state.L, cfg.M))
    drain = cycle_energy(cfg, state.h2, state.h2_fb, a, code=code)
    if isinstance(next_draws, tuple) and len(next_draws) == 2 and isinstance(next_draws[0], np.ndarray):
        h2, h2_fb = next_draws
    else:
        h2 = np.array([d.h2 for d in next_draws], dtype=float)
        h2_fb = np.array([d.h2_fb for d in next_draws], dtype=float)
    return CellState(state.energy - drain, np.asarray(h2, float), np.asarray(h2_fb, float), state.cycle + 1)
