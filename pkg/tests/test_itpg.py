import math

import numpy as np
import pytest

from feedcell.core import CellState, cycle_energy, preset
from feedcell.itpg import (IndexNet, IndexTable, ItpgConfig, ItpgPolicy, Rollout, _policy_terms, action_marginals,
                           advantages, best_action, best_action_bruteforce, build_index_table, device_features,
                           itpg_train, log_partition, log_prob, per_device_reward, policy_probabilities,
                           returns_to_go, sample_action, savings_targets, savings_unit,
                           warm_start)
from feedcell.mdp import enumerate_actions, run_episode


def random_table(rng, L, M, ties=False):
    rows = rng.normal(size=(L, M + 1))
    if ties:
        rows = np.round(rows * 2) / 2
    rows[:, 0] = 0.0
    mask = rng.random((L, M + 1)) > 0.3
    mask[:, 0] = True
    return IndexTable(rows, mask, literal_zero=bool(rng.random() < 0.2))


def test_best_action_matches_enumeration():
    rng = np.random.default_rng(0)
    for n in range(10_000):
        L, M = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        t = random_table(rng, L, M, ties=n % 3 == 0)
        assert best_action(t) == best_action_bruteforce(t)


def test_best_action_examples():
    M = 4
    inc = np.array([0.0, 1.0, 2.0, 3.0, 4.5])
    t = IndexTable(np.tile(inc, (3, 1)), np.ones((3, M + 1), bool))
    # budget concentrated on one device; ties go to the lexicographically smallest allocation
    assert best_action(t) == (0, 0, 4)
    neg = IndexTable(np.tile([0.0, -1, -2, -3, -4], (3, 1)), np.ones((3, M + 1), bool))
    assert best_action(neg) == (0, 0, 0)
    masked = np.zeros((3, M + 1), bool)
    masked[:, 0] = True
    assert best_action(IndexTable(np.tile(inc, (3, 1)), masked)) == (0, 0, 0)
    single = IndexTable(np.array([[0.0, 1.0, 3.0, 2.0, 0.5]]), np.ones((1, M + 1), bool))
    assert best_action(single) == (2,)


def test_table_validation():
    with pytest.raises(ValueError):
        IndexTable(np.ones((2, 3)), np.ones((2, 3), bool))
    rows = np.zeros((2, 3))
    m = np.ones((2, 3), bool)
    m[0, 0] = False
    with pytest.raises(ValueError):
        IndexTable(rows, m)


def test_build_table_and_masks():
    cfg = preset("calibrated", L=3, M=4)
    net = IndexNet(4, rng=np.random.default_rng(1))
    s = CellState(np.full(3, 1000.0), np.array([1e-9, 5.0, 5.0]), np.full(3, 5.0))
    t = build_index_table(net, s, cfg)
    assert np.all(t.rows[:, 0] == 0) and not t.mask[0, 1:].any()
    f = device_features(cfg, s)
    assert np.allclose(t.rows[1, 1:], net.mlp(f[1:2])[0])
    # joint scores are the sum of rows
    for a in enumerate_actions(3, 4):
        if t.feasible(a):
            assert t.joint_score(a) == pytest.approx(sum(t.rows[l, a[l]] for l in range(3)))


def test_urgency_weights():
    net = IndexNet(2, hidden=(8,), rng=np.random.default_rng(0), urgency=10.0)
    f = np.array([[0.5, 1.0, 1.0], [0.3, 1.0, 1.0]])
    w = net.weights(f)
    assert w[1] / w[0] == pytest.approx(math.exp(2.0))
    assert np.allclose(net.rows(f)[:, 1:], net.mlp(f) * w[:, None])
    with pytest.raises(ValueError):
        IndexNet(2, urgency=-1.0)


def enumerate_softmax(t, temp):
    acts, p = policy_probabilities(t, temp)
    return {a: q for a, q in zip(acts, p)}


def test_softmax_dp_matches_enumeration():
    rng = np.random.default_rng(2)
    for _ in range(500):
        L, M = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        t = random_table(rng, L, M)
        temp = float(rng.choice([0.3, 1.0, 2.0]))
        probs = enumerate_softmax(t, temp)
        x = t.effective()[None] / temp
        Z = log_partition(x)
        marg = action_marginals(x, Z)[0]
        want = np.zeros((L, M + 1))
        for a, q in probs.items():
            for l in range(L):
                want[l, a[l]] += q
        assert np.allclose(marg, want, atol=1e-12)
        feas = [a for a in probs if probs[a] > 0]
        lp = log_prob(x, np.array(feas), np.repeat(Z, len(feas), axis=0))
        assert np.allclose(np.exp(lp), [probs[a] for a in feas], rtol=1e-10)


def test_policy_probability_examples():
    t = IndexTable(np.array([[0.0, 0.0]]), np.ones((1, 2), bool))
    _, p = policy_probabilities(t)
    assert np.allclose(p, [0.5, 0.5])
    t = IndexTable(np.array([[0.0, math.log(3)]]), np.ones((1, 2), bool))
    _, p = policy_probabilities(t)
    assert np.allclose(p, [0.25, 0.75])
    # scaling the scores and the temperature together leaves the distribution unchanged
    t = random_table(np.random.default_rng(3), 3, 3)
    scaled = IndexTable(t.rows * 2.5, t.mask, t.literal_zero)
    _, p1 = policy_probabilities(t)
    _, p2 = policy_probabilities(scaled, temperature=2.5)
    assert np.allclose(p1, p2, atol=1e-12)


def test_sampling_frequencies():
    rng = np.random.default_rng(4)
    t = random_table(rng, 3, 2)
    probs = enumerate_softmax(t, 1.0)
    n = 40_000
    counts = {}
    for _ in range(n):
        a, lp = sample_action(t, rng, return_logp=True)
        assert probs[a] > 0
        counts[a] = counts.get(a, 0) + 1
    assert math.exp(lp) == pytest.approx(probs[a], rel=1e-10)
    for a, q in probs.items():
        assert counts.get(a, 0) / n == pytest.approx(q, abs=4 * math.sqrt(q * (1 - q) / n) + 1e-9)


def test_logp_gradient_finite_difference():
    rng = np.random.default_rng(5)
    cfg = preset("calibrated", L=3, M=3)
    net = IndexNet(3, hidden=(6,), rng=rng, urgency=4.0)
    net.mlp.set_flat(net.mlp.get_flat() + rng.normal(0, 0.1, net.mlp.n_params))
    S = 5
    feats = np.abs(rng.normal(1.0, 0.3, (S, 3, 3)))
    masks = rng.random((S, 3, 4)) > 0.2
    masks[:, :, 0] = True
    acts = np.zeros((S, 3), dtype=int)
    for s in range(S):
        t = IndexTable(net.rows(feats[s]), masks[s])
        acts[s] = sample_action(t, rng, temperature=0.7)
    tcfg = ItpgConfig(temperature=0.7)
    coef = rng.normal(size=S)
    cache, _, logp, dx = _policy_terms(net, feats, masks, acts, tcfg)
    # analytic gradient of sum_s coef[s] logp[s] with respect to the raw outputs, then the parameters
    dy = (coef[:, None, None] * dx / tcfg.temperature)[:, :, 1:].reshape(S * 3, 3)
    grads = np.concatenate([g.ravel() for g in net.mlp.backward(cache, dy)])
    flat = net.mlp.get_flat()

    def objective(theta):
        net.mlp.set_flat(theta)
        return float(np.sum(coef * _policy_terms(net, feats, masks, acts, tcfg)[2]))

    num = np.zeros_like(flat)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = 1e-6
        num[i] = (objective(flat + e) - objective(flat - e)) / 2e-6
    net.mlp.set_flat(flat)
    rel = np.abs(grads - num) / np.maximum(1e-6, np.abs(grads) + np.abs(num))
    assert rel.max() <= 1e-4


def test_per_device_reward():
    assert per_device_reward(3.0, 4) == 0.25
    assert per_device_reward(-1.0, 4) == 0.0
    assert sum(per_device_reward(1.0, 5) for _ in range(5)) == pytest.approx(1.0)


def test_returns_and_advantages():
    g = returns_to_go(5, 1.07)
    assert g[0] == pytest.approx(5.0) and np.all(np.diff(g) < 0)
    dummy = lambda T: Rollout(np.zeros((T, 1, 3)), np.ones((T, 1, 2), bool), np.zeros((T, 1), int), np.zeros(T))
    tcfg = ItpgConfig(normalize_advantage=False)
    adv, mean_ret = advantages([dummy(3), dummy(5)], tcfg)
    assert mean_ret == pytest.approx(4.0)
    assert len(adv) == 8
    # leave-one-out within a pair: each episode is compared with the other
    adv, _ = advantages([dummy(3), dummy(5)], tcfg, groups=[[0, 1]])
    assert adv[0] == pytest.approx(returns_to_go(3, 1.07)[0] - 5.0)


def test_warm_start_fits_savings():
    cfg = preset("calibrated", L=2, M=2)
    net = IndexNet(2, hidden=(32, 32), rng=np.random.default_rng(6))
    mse = warm_start(net, cfg, np.random.default_rng(7), samples=4000, steps=1500)
    rng = np.random.default_rng(8)
    y = []
    for _ in range(1000):
        h2, hf = rng.exponential(5.0, 2), rng.exponential(5.0, 2)
        y.append(savings_targets(cfg, CellState(np.full(2, 100.0), h2, hf), 1.0))
    y = np.concatenate(y)
    one = preset("calibrated", L=1, M=2)
    unit = np.mean(cycle_energy(one, rng.exponential(5.0, 10**5), rng.exponential(5.0, 10**5), np.zeros(10**5, int)))
    assert savings_unit(cfg) == pytest.approx(unit, rel=0.02)
    # the fit explains most of the variance of the one-cycle savings
    assert mse < 0.2 * np.var(y / unit)


@pytest.mark.parametrize("method", ["reinforce", "ppo"])
def test_training_smoke(method):
    cfg = preset("calibrated", L=2, M=2)
    tcfg = ItpgConfig(method=method, batch_episodes=4, hidden=(16,), warm_start_samples=2000,
                      warm_start_steps=200, temperature=0.1)
    seen = []
    pol, log = itpg_train(cfg, 8, np.random.default_rng(8), tcfg, callback=lambda net, row: seen.append(row))
    assert isinstance(pol, ItpgPolicy) and len(log.rows) == 2 and len(seen) == 2
    assert pol.net.mlp.is_finite()
    traj = run_episode(pol, cfg, np.random.default_rng(9))
    assert all(sum(a) <= 2 for a in traj.actions)


def test_training_is_seeded():
    cfg = preset("calibrated", L=2, M=2)
    tcfg = ItpgConfig(batch_episodes=2, hidden=(8,), warm_start_samples=500, warm_start_steps=50)
    a, _ = itpg_train(cfg, 2, np.random.default_rng(10), tcfg)
    b, _ = itpg_train(cfg, 2, np.random.default_rng(10), tcfg)
    assert np.array_equal(a.net.mlp.get_flat(), b.net.mlp.get_flat())
