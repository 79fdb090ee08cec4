import math

import numpy as np
import pytest
from scipy import integrate

from feedcell.core import ChannelDraw, preset, transmit_power
from feedcell.power import (PropConstants, expected_power, forward_expected_power, histogram_tv,
                            mc_expected_power, power_cdf, power_pdf, power_reductions, prop_constants,
                            s_cdf, s_pdf, sample_uncapped_power)


@pytest.fixture(scope="module")
def cal():
    return preset("calibrated", L=1, M=5)


def test_constants():
    c = preset("table1")
    pc = prop_constants(c, 0, 1)
    assert pc.U1 == pytest.approx(0.2302585093, rel=1e-9)
    assert pc.U3 == pytest.approx(0.13 * 10 / math.log(10), rel=1e-12)
    assert pc.U3 == pytest.approx(0.5646, abs=1e-4)
    assert pc.U0 == pytest.approx(7.551e-8, rel=1e-3)
    with pytest.raises(ValueError):
        prop_constants(c, 0, 0)
    with pytest.raises(ValueError):
        PropConstants(0.0, 1.0, 1.0, 1.0, 0.1)


def test_factorisation_matches_core(cal):
    # U0 * S / |h|^2 must be the uncapped power of the core model
    rng = np.random.default_rng(0)
    for a in (1, 3):
        pc = prop_constants(cal, 0, a)
        for h2, hf in rng.exponential(5.0, (50, 2)):
            s = math.exp(pc.U1 / (pc.U2 * hf**pc.U3 + pc.u4))
            p = pc.U0 * s / h2
            if p < cal.P_max:
                assert transmit_power(cal, 0, ChannelDraw(h2, hf), a) == pytest.approx(p, rel=1e-9)


@pytest.mark.parametrize("a", [1, 4])
def test_s_density(cal, a):
    pc = prop_constants(cal, 0, a)
    s_top = math.exp(pc.r_max)
    assert s_pdf(s_top * (1 + 1e-9), pc, 5.0) == 0.0
    assert s_pdf(0.5, pc, 5.0) == 0.0
    total = integrate.quad(lambda r: s_pdf(math.exp(r), pc, 5.0) * math.exp(r), 0, pc.r_max, limit=400)[0]
    assert total == pytest.approx(1.0, abs=1e-4)
    # cdf/pdf consistency and agreement with samples
    s = np.exp(pc.U1 / (pc.U2 * np.random.default_rng(1).exponential(5.0, 10**5) ** pc.U3 + pc.u4))
    for q in (0.1, 0.5, 0.9):
        x = float(np.quantile(s, q))
        assert s_cdf(x, pc, 5.0) == pytest.approx(q, abs=0.01)
        h = 1e-6 * x
        fd = (s_cdf(x + h, pc, 5.0) - s_cdf(x - h, pc, 5.0)) / (2 * h)
        assert s_pdf(x, pc, 5.0) == pytest.approx(fd, rel=1e-4)


@pytest.mark.parametrize("preset_name", ["calibrated", "table1"])
def test_power_pdf_normalised(preset_name):
    c = preset(preset_name, L=1)
    p_med = float(np.median(sample_uncapped_power(c, 0, 2, 20000, np.random.default_rng(2))[0]))
    f = lambda t: power_pdf(math.exp(t), c, 0, 2) * math.exp(t)
    lt = math.log(p_med)
    total = sum(integrate.quad(f, lo, hi, limit=200)[0]
                for lo, hi in [(lt - 40, lt - 5), (lt - 5, lt), (lt, lt + 5), (lt + 5, lt + 40)])
    assert total == pytest.approx(1.0, abs=1e-3)
    assert power_pdf(p_med * 1e-12, c, 0, 2) < 1e-20 * power_pdf(p_med, c, 0, 2)
    assert power_pdf(0.0, c, 0, 2) == 0.0 and power_cdf(-1.0, c, 0, 2) == 0.0


def test_pdf_is_cdf_derivative(cal):
    for p in (0.01, 0.08, 0.5):
        h = 1e-5 * p
        fd = (power_cdf(p + h, cal, 0, 3) - power_cdf(p - h, cal, 0, 3)) / (2 * h)
        assert power_pdf(p, cal, 0, 3) == pytest.approx(fd, rel=1e-5)


@pytest.mark.parametrize("a", [1, 3, 5])
def test_histogram_tv(cal, a):
    assert histogram_tv(cal, 0, a, 200_000, np.random.default_rng(a)) < 0.02


def test_expected_power_vs_mc(cal):
    rng = np.random.default_rng(5)
    prev = math.inf
    for a in range(1, 6):
        ep = expected_power(cal, 0, a)
        mc, se = mc_expected_power(cal, 0, a, 400_000, rng)
        assert abs(ep - mc) < max(4 * se, 0.01 * ep)
        assert ep <= prev
        prev = ep


def test_forward_vs_mc(cal):
    for code in ("polar", "turbo"):
        mc, se = mc_expected_power(cal, 0, 0, 400_000, np.random.default_rng(8), code=code)
        assert forward_expected_power(cal, 0, code) == pytest.approx(mc, abs=4 * se)


def test_cap_limit():
    c = preset("calibrated", L=1, P_max=1e-12)
    assert expected_power(c, 0, 2) <= 1e-12
    assert expected_power(c, 0, 2) == pytest.approx(1e-12, rel=1e-3)


def test_mc_single_and_se_scaling(cal):
    rng = np.random.default_rng(11)
    m, se = mc_expected_power(cal, 0, 1, 1, np.random.default_rng(3))
    r = np.random.default_rng(3)
    h2, hf = r.exponential(5.0), r.exponential(5.0)
    assert m == pytest.approx(transmit_power(cal, 0, ChannelDraw(h2, hf), 1), rel=1e-12)
    assert math.isnan(se)
    _, se_small = mc_expected_power(cal, 0, 1, 10**4, rng)
    _, se_big = mc_expected_power(cal, 0, 1, 10**6, rng)
    assert se_small / se_big == pytest.approx(10.0, rel=0.2)
    with pytest.raises(ValueError):
        mc_expected_power(cal, 0, 1, 0, rng)


def test_reductions_shape(cal):
    base, rows = power_reductions(cal, a_values=(1, 5))
    assert set(base) == {"polar", "turbo"} and base["polar"] > base["turbo"]
    for a, ep, red in rows:
        assert 0 < red["turbo"] < red["polar"] < 1
