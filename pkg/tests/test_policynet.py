import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from cellbandit import policynet, truncnorm
from cellbandit.domain import CP_BOX, N_CPS
from cellbandit.ndmath import finite_difference
from cellbandit.policynet import OPPGConfig, PolicyError, PolicyNet
from cellbandit.simnet import Simulator


def policy_for(d, mean_b=0.0, log_std=np.log(0.2), seed=0):
    p = policynet.init_policy(d, seed=seed)
    p.params["mean_b"] = np.full(N_CPS, mean_b, dtype=float)
    p.params["log_std"] = np.full(N_CPS, log_std, dtype=float)
    return p


class ScaledLogging:
    """Density equal to ``factor`` times the logged propensity."""

    def __init__(self, d, factor):
        self.d, self.factor = d, factor

    def density(self, states, actions):
        return self.factor * self.d.propensity


# -- truncated normal ------------------------------------------------------------
@settings(max_examples=80, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(-0.5, 1.5), st.floats(0.01, 2.0))
def test_truncnorm_logpdf_matches_scipy(x, mean, std):
    a, b = (0 - mean) / std, (1 - mean) / std
    ref = stats.truncnorm.logpdf(x, a, b, loc=mean, scale=std)
    assert truncnorm.logpdf(x, mean, std) == pytest.approx(ref, rel=1e-9, abs=1e-9)


@pytest.mark.parametrize("mean,std", [(0.5, 1e-3), (0.0, 0.05), (1.0, 0.3), (0.2, 1.0), (-0.3, 0.1)])
def test_truncnorm_density_integrates_to_one(mean, std):
    f = lambda x: np.exp(truncnorm.logpdf(x, mean, std))  # noqa: E731
    pts = [min(max(mean, 0.0), 1.0)]
    total, _ = integrate.quad(f, 0.0, 1.0, points=pts, limit=200, epsabs=1e-12)
    assert 0.999 <= total <= 1.001


def test_truncnorm_outside_support():
    assert truncnorm.logpdf(-1e-9, 0.5, 0.2) == -np.inf
    assert truncnorm.logpdf(1.0 + 1e-9, 0.5, 0.2) == -np.inf


def test_truncnorm_symmetry():
    x = np.linspace(0, 1, 11)
    np.testing.assert_allclose(truncnorm.logpdf(x, 0.3, 0.2), truncnorm.logpdf(1 - x, 0.7, 0.2), rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(-0.3, 1.3), st.floats(0.05, 1.0))
def test_truncnorm_score_matches_fd(x, mean, std):
    d_mean, d_std = truncnorm.score(x, mean, std)
    g = finite_difference(lambda v: float(truncnorm.logpdf(x, v[0], v[1])), np.array([mean, std]), 1e-6)
    assert d_mean == pytest.approx(g[0], rel=1e-5, abs=1e-6)
    assert d_std == pytest.approx(g[1], rel=1e-5, abs=1e-6)


def test_truncnorm_sample_mean():
    n = 100_000
    for mean, std in ((0.5, 0.3), (0.95, 0.2), (0.0, 0.5)):
        x = truncnorm.sample(np.full(n, mean), std, np.random.default_rng(3))
        a, b = (0 - mean) / std, (1 - mean) / std
        m = stats.truncnorm.mean(a, b, loc=mean, scale=std)
        se = stats.truncnorm.std(a, b, loc=mean, scale=std) / np.sqrt(n)
        assert abs(x.mean() - m) < 4 * se
        assert x.min() >= 0 and x.max() <= 1


# -- policy sampling and density -------------------------------------------------
def test_min_std_samples_concentrate(small_data):
    p = policy_for(small_data, mean_b=0.0, log_std=np.log(1e-4))
    assert np.all(p.std == policynet.STD_MIN)
    p.params["mean_W"][:] = 0
    u = p.sample_normalized(small_data.states.take(np.arange(20)), np.random.default_rng(0))
    assert np.max(np.abs(u - 0.5)) < 5e-3


def test_samples_in_box_and_density_consistent(small_data):
    p = policynet.init_policy(small_data, seed=2)
    s = small_data.states.take(np.arange(40))
    a = p.sample(s, 4)
    assert np.all(CP_BOX.contains(a))
    u = CP_BOX.normalize(a)
    ref = np.sum(truncnorm.logpdf(u, p.mean_normalized(s), p.std), axis=1) - CP_BOX.log_volume
    np.testing.assert_allclose(p.log_density(s, a), ref, rtol=1e-13)


def test_policy_sample_mean_matches_truncnorm(small_data):
    p = policy_for(small_data, mean_b=1.0, log_std=np.log(0.3))
    n = 100_000
    s = small_data.states.take(np.zeros(n, dtype=int))
    u = p.sample_normalized(s, np.random.default_rng(8))
    c = p.mean_normalized(small_data.states.take([0]))[0]
    sd = p.std
    a, b = (0 - c) / sd, (1 - c) / sd
    mean = stats.truncnorm.mean(a, b, loc=c, scale=sd)
    se = stats.truncnorm.std(a, b, loc=c, scale=sd) / np.sqrt(n)
    assert np.all(np.abs(u.mean(axis=0) - mean) < 4 * se)


def test_policy_density_marginal_quadrature(small_data):
    # fix 13 CPs, integrate over the remaining one in raw units
    p = policynet.init_policy(small_data, seed=1)
    s = small_data.states.take([3])
    base = CP_BOX.denormalize(np.full((1, N_CPS), 0.4))
    for i in (0, 6, 13):
        def f(x):
            a = base.copy()
            a[0, i] = x
            return p.density(s, a)[0]
        rest = np.delete(CP_BOX.normalize(base)[0], i)
        others = np.exp(np.sum(truncnorm.logpdf(rest, np.delete(p.mean_normalized(s)[0], i), np.delete(p.std, i))))
        lo, hi = CP_BOX.low[i], CP_BOX.high[i]
        total, _ = integrate.quad(f, lo, hi, limit=200)
        vol_rest = np.exp(CP_BOX.log_volume - np.log(hi - lo))
        ratio = total * vol_rest / others
        assert 0.999 <= ratio <= 1.001


def test_density_zero_outside_box(small_data):
    p = policynet.init_policy(small_data)
    a = CP_BOX.high.copy()[None]
    a[0, 2] += 1e-6
    assert p.log_density(small_data.states.take([0]), a)[0] == -np.inf
    assert p.density(small_data.states.take([0]), a)[0] == 0.0


def test_feature_width_checked(small_data):
    p = policynet.init_policy(small_data)
    q = PolicyNet(p.params, p.feat_mean[:-1], p.feat_std[:-1])
    with pytest.raises(ValueError, match="features"):
        q.mean_normalized(small_data.states.take([0]))


# -- IPS ---------------------------------------------------------------------------
def test_ips_of_logging_policy_is_mean_reward(small_data, small_sim_config):
    pol = Simulator(small_sim_config).logging_policy()
    ratios = policynet.importance_ratios(small_data, pol)
    np.testing.assert_array_equal(ratios, np.ones(len(small_data)))
    j, var = policynet.ips_estimate(small_data, pol)
    assert j == np.mean(small_data.reward)
    assert var == np.var(small_data.reward)


def test_ips_single_row(small_data):
    d = small_data.take([0]).with_rows(reward=np.array([3.0]))
    j, var = policynet.ips_estimate(d, ScaledLogging(d, 2.0))
    assert j == 6.0 and var == 0.0


def test_ips_rejects_non_positive_propensity(small_data):
    d = small_data.take([0, 1])
    d.propensity[1] = 0.0
    with pytest.raises(ValueError, match="row 1"):
        policynet.ips_estimate(d, ScaledLogging(d, 1.0))


def test_ips_ignores_hypothetical_rows(small_data):
    from cellbandit.datastore import augment_counterfactual
    d = small_data.take(np.arange(30))
    aug = augment_counterfactual(d, k=3, seed=0)
    p = policynet.init_policy(d)
    assert policynet.ips_estimate(aug, p) == policynet.ips_estimate(d, p)


def test_truncated_ips_bounds(small_data):
    d = small_data.take(np.arange(100)).with_rows(reward=np.ones(100))
    p = policy_for(d, mean_b=2.0)
    r = policynet.importance_ratios(d, p)
    assert policynet.truncated_ips(d, p, 1.0) == pytest.approx(np.mean(np.minimum(r, 1.0)))
    assert policynet.truncated_ips(d, p, 1.0) <= policynet.truncated_ips(d, p, 1e9) + 1e-15


# -- OPPG gradient -----------------------------------------------------------------
def test_zero_reward_zero_gradient(small_data):
    d = small_data.take(np.arange(20)).with_rows(reward=np.zeros(20))
    g, _ = policynet.oppg_gradient(d, policynet.init_policy(d), M=5.0)
    for v in g.values():
        assert np.all(v == 0)


def test_weights_are_truncated_ratios(small_data):
    d = small_data.take(np.arange(50))
    p = policy_for(d, mean_b=1.5)
    _, w = policynet.oppg_gradient(d, p, M=2.0)
    np.testing.assert_allclose(w, np.minimum(policynet.importance_ratios(d, p), 2.0), rtol=1e-12)
    assert w.max() <= 2.0


def _frozen_objective(d, p, M, baseline=False):
    w = np.minimum(policynet.importance_ratios(d, p), M)
    r = d.reward - d.reward.mean() if baseline else d.reward

    def f(name, flat):
        q = PolicyNet(dict(p.params, **{name: flat.reshape(p.params[name].shape)}), p.feat_mean, p.feat_std)
        return float(np.mean(w * r * q.log_density(d.states, d.action)))
    return f


@pytest.mark.parametrize("baseline", [False, True])
def test_gradient_matches_finite_difference(small_data, baseline):
    d = small_data.take(np.arange(0, 200, 20))
    p = policy_for(d, mean_b=0.3, log_std=np.log(0.25), seed=4)
    g, _ = policynet.oppg_gradient(d, p, M=3.0, baseline=baseline)
    f = _frozen_objective(d, p, 3.0, baseline)
    rng = np.random.default_rng(0)
    for name in ("trunk_W", "trunk_b", "mean_W", "mean_b", "log_std"):
        flat = p.params[name].ravel()
        idx = rng.choice(flat.size, min(12, flat.size), replace=False)
        for i in idx:
            def fi(v):
                x = flat.copy()
                x[i] = v[0]
                return f(name, x)
            fd = finite_difference(fi, flat[i:i + 1], 1e-6)[0]
            assert g[name].ravel()[i] == pytest.approx(fd, rel=1e-4, abs=1e-8), name


def test_truncation_lowers_weight_variance(small_data):
    d = small_data.take(np.arange(200))
    # a slightly narrower copy of the logging fit puts ratios on both sides of 1
    p = policynet.init_policy(d)
    p.params["log_std"] -= 0.3
    _, w1 = policynet.oppg_gradient(d, p, M=1.0)
    _, w100 = policynet.oppg_gradient(d, p, M=100.0)
    assert np.all(w1 <= w100)
    assert np.var(w1 * d.reward) < np.var(w100 * d.reward)


def test_gradient_rejects_hypothetical_rows(small_data):
    from cellbandit.datastore import augment_counterfactual
    aug = augment_counterfactual(small_data.take(np.arange(10)), k=2, seed=0)
    with pytest.raises(ValueError):
        policynet.oppg_gradient(aug, policynet.init_policy(small_data), 5.0)


# -- training ----------------------------------------------------------------------
def test_zero_lr_leaves_policy_unchanged(small_data):
    init = policynet.init_policy(small_data, seed=3)
    p, hist = policynet.train_oppg(small_data, OPPGConfig(lr=0.0, epochs=3, batch_size=64), init=init)
    for k in init.params:
        np.testing.assert_array_equal(p.params[k], init.params[k])
    assert hist[0] == hist[1] == hist[2]


def test_training_does_not_mutate_init(small_data):
    init = policynet.init_policy(small_data, seed=3)
    before = {k: v.copy() for k, v in init.params.items()}
    policynet.train_oppg(small_data, OPPGConfig(epochs=1, batch_size=64, lr=1e-2), init=init)
    for k in before:
        np.testing.assert_array_equal(init.params[k], before[k])


def test_training_moves_toward_better_actions():
    # positive reward peaked near the top of every CP range
    from cellbandit.simnet import SimConfig, generate_dataset
    d = generate_dataset(SimConfig(n_cells=40, n_days=2, seed=2))
    u = CP_BOX.normalize(d.action)
    d = d.with_rows(reward=np.exp(-np.sum((u - 0.9) ** 2, axis=1)))
    cfg = OPPGConfig(epochs=8, batch_size=64, lr=1e-2, baseline=True)
    init = policynet.init_policy(d, cfg.seed)
    p, hist = policynet.train_oppg(d, cfg, init=init)
    assert hist[-1] > policynet.truncated_ips(d, init, cfg.M)
    assert p.mean_normalized(d.states).mean() > init.mean_normalized(d.states).mean()


def test_training_deterministic(small_data):
    cfg = OPPGConfig(epochs=2, batch_size=64, seed=5)
    a, ha = policynet.train_oppg(small_data, cfg)
    b, hb = policynet.train_oppg(small_data, cfg)
    assert ha == hb
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()


def test_divergence_aborts(small_data):
    d = small_data.with_rows(reward=np.full(len(small_data), 1e9))
    with pytest.raises(PolicyError, match="diverged"):
        policynet.train_oppg(d, OPPGConfig(epochs=1, batch_size=64))


def test_too_small_dataset(small_data):
    with pytest.raises(ValueError, match="minibatch"):
        policynet.train_oppg(small_data.take(np.arange(10)), OPPGConfig(batch_size=64))


@pytest.mark.parametrize("bad", [dict(M=0), dict(lr=-1), dict(epochs=0), dict(batch_size=0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        OPPGConfig(**bad)


# -- direct method and quantiles ---------------------------------------------------
class ConstantEnsemble:
    def __init__(self, c):
        self.c = c

    def predict(self, states, actions):
        n = len(actions)
        return np.full(n, self.c), np.zeros(n)


def test_dm_constant_model(small_data):
    s = small_data.states.take(np.arange(7))
    v, q = policynet.dm_value(ConstantEnsemble(2.5), s, small_data.action[:7])
    assert np.all(v == 2.5)
    assert all(x == 2.5 for x in q.values())


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=60))
def test_quantiles_match_sort_oracle(xs):
    x = np.sort(np.array(xs))
    n = len(x)
    q = policynet.quantiles(np.array(xs))
    assert list(q) == [5, 25, 50, 75, 95]
    for p, v in q.items():
        pos = p / 100 * (n - 1)
        lo = int(np.floor(pos))
        hi = min(lo + 1, n - 1)
        expected = x[lo] + (pos - lo) * (x[hi] - x[lo])
        assert v == pytest.approx(expected, rel=1e-12, abs=1e-9)


# -- checkpoints -------------------------------------------------------------------
def test_checkpoint_round_trip(small_data, tmp_path):
    p = policynet.init_policy(small_data, seed=6)
    policynet.save_policy(p, tmp_path / "pol", {"note": 1})
    q = policynet.load_policy(tmp_path / "pol")
    s = small_data.states.take(np.arange(10))
    assert p.log_density(s, small_data.action[:10]).tobytes() == q.log_density(s, small_data.action[:10]).tobytes()
    assert p.sample(s, 1).tobytes() == q.sample(s, 1).tobytes()


def test_checkpoint_kind_checked(small_data, small_ensemble, tmp_path):
    from cellbandit.rewardnet import save_ensemble
    save_ensemble(small_ensemble, tmp_path / "rew")
    with pytest.raises(ValueError):
        policynet.load_policy(tmp_path / "rew")
