import json
import shutil
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cellbandit import datastore, rewardnet, simnet
from cellbandit.domain import N_CPS, StateBatch
from cellbandit.ndmath import Tape, finite_difference
from cellbandit.rewardnet import HIDDEN, RewardEnsemble, RewardNet, TrainConfig

FIXTURES = Path(__file__).parent / "fixtures"


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def gru_reference(x, h, Wg, bg, Wc, bc):
    g = sigmoid(np.concatenate([x, h], -1) @ Wg + bg)
    z, r = g[..., :HIDDEN], g[..., HIDDEN:]
    cand = np.tanh(np.concatenate([x, r * h], -1) @ Wc + bc)
    return (1 - z) * h + z * cand


def gru_tape():
    t = Tape()
    p = {n: t.input(n) for n in ("gru_Wg", "gru_bg", "gru_Wc", "gru_bc")}
    t.set_output(rewardnet.gru_step(t, t.input("x"), t.input("h"), p, tag=""))
    return t


def random_net(scaler, seed, scale=1.0, C=8, T=24):
    return RewardNet(rewardnet.init_params(C, seed, scale), scaler, T, C)


@pytest.fixture(scope="module")
def scaler(small_data):
    return datastore.fit_standardizer(small_data)


# -- GRU ------------------------------------------------------------------
def test_gru_zero_parameters_halves_state(rng):
    C = 3
    t = gru_tape()
    h = rng.normal(size=(4, HIDDEN))
    b = {"x": rng.normal(size=(4, C)), "h": h, "gru_Wg": np.zeros((C + HIDDEN, 2 * HIDDEN)),
         "gru_bg": np.zeros(2 * HIDDEN), "gru_Wc": np.zeros((C + HIDDEN, HIDDEN)), "gru_bc": np.zeros(HIDDEN)}
    np.testing.assert_allclose(t.eval(b), 0.5 * h, rtol=0, atol=1e-12)


def test_gru_hand_values(rng):
    # gates at 0.5 and a constant candidate tanh(c): h' = 0.5 h + 0.5 tanh(c)
    C = 2
    t = gru_tape()
    h = np.linspace(-1, 1, HIDDEN)[None]
    c = np.linspace(-2, 2, HIDDEN)
    b = {"x": np.array([[0.3, -0.7]]), "h": h, "gru_Wg": np.zeros((C + HIDDEN, 2 * HIDDEN)),
         "gru_bg": np.zeros(2 * HIDDEN), "gru_Wc": np.zeros((C + HIDDEN, HIDDEN)), "gru_bc": c}
    np.testing.assert_allclose(t.eval(b), 0.5 * h + 0.5 * np.tanh(c), rtol=0, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gru_matches_numpy_reference(seed):
    rng = np.random.default_rng(seed)
    C = 4
    b = {"x": rng.normal(size=(3, C)), "h": rng.normal(size=(3, HIDDEN)),
         "gru_Wg": rng.normal(size=(C + HIDDEN, 2 * HIDDEN)) * 0.3, "gru_bg": rng.normal(size=2 * HIDDEN),
         "gru_Wc": rng.normal(size=(C + HIDDEN, HIDDEN)) * 0.3, "gru_bc": rng.normal(size=HIDDEN)}
    out = gru_tape().eval(b)
    ref = gru_reference(b["x"], b["h"], b["gru_Wg"], b["gru_bg"], b["gru_Wc"], b["gru_bc"])
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)
    # update form h' = (1 - z) h + z h~
    g = sigmoid(np.concatenate([b["x"], b["h"]], -1) @ b["gru_Wg"] + b["gru_bg"])
    z = g[:, :HIDDEN]
    cand = (ref - (1 - z) * b["h"]) / z
    assert np.all(np.abs(cand) <= 1 + 1e-12)


def test_zero_gru_gives_zero_counter_representation(small_data, scaler):
    params = rewardnet.init_params(8, 0)
    for k in ("gru_Wg", "gru_bg", "gru_Wc", "gru_bc"):
        params[k] = np.zeros_like(params[k])
    t = rewardnet.build_covariate_tape(24)
    b = rewardnet._state_bindings(scaler.transform_states(small_data.states.take([0, 1])))
    b.update({n: params[n] for n in rewardnet.COV_PARAMS})
    t.eval(b)
    np.testing.assert_array_equal(t.values[t.node("h_23")], np.zeros((2, HIDDEN)))


# -- architecture ----------------------------------------------------------
def test_architecture_widths_and_cp_placement(small_data, scaler):
    t = rewardnet.build_training_tape(24)
    net = random_net(scaler, 0)
    b = rewardnet._state_bindings(scaler.transform_states(small_data.states.take([0, 1, 2])))
    b.update(net.params)
    b["action"] = np.full((3, N_CPS), 0.5)
    b["target"] = np.zeros((3, 1))
    t.eval(b)
    for label in ("time_rep", "ep_rep", "h_23", "covariates", "cp_rep", "out_hidden"):
        assert t.values[t.node(label)].shape == (3, HIDDEN), label
    assert t.values[t.node("cov_in")].shape == (3, 3 * HIDDEN)
    assert not t.depends_on(t.node("covariates"), "action")
    assert t.depends_on(t.node("joint"), "action") and t.depends_on(t.node("joint"), "time")
    assert t.values[t.node("prediction")].shape == (3, 1)


def test_zero_network_predicts_zero_with_zero_gradient(small_data, scaler):
    params = {k: np.zeros_like(v) for k, v in rewardnet.init_params(8, 0).items()}
    net = RewardNet(params, scaler, 24, 8)
    s, a = small_data.states.take([0, 4]), small_data.action[[0, 4]]
    np.testing.assert_array_equal(net.predict(s, a), [0.0, 0.0])
    np.testing.assert_array_equal(net.grad_action(s, a), np.zeros((2, N_CPS)))


def test_counter_order_matters(small_data, scaler):
    net = random_net(scaler, 1)
    s = small_data.states.take([10])
    c = s.counters.copy()
    c[:, [5, 20]] = c[:, [20, 5]]
    swapped = StateBatch(s.time, s.ep, c)
    a = small_data.action[[10]]
    assert net.predict(s, a)[0] != net.predict(swapped, a)[0]


def test_dimension_mismatch(small_data, scaler):
    net = random_net(scaler, 0)
    s = scaler.transform_states(small_data.states.take([0]))
    with pytest.raises(ValueError):
        rewardnet.predict(net, StateBatch(s.time, s.ep, s.counters[:, :5]), np.zeros((1, N_CPS)))
    with pytest.raises(ValueError):
        rewardnet.predict(net, s, np.zeros((1, 3)))


def test_single_model_gradient_matches_fd(small_data, scaler):
    rng = np.random.default_rng(5)
    net = random_net(scaler, 2)
    idx = rng.choice(len(small_data), 100, replace=False)
    cov = net.covariates(scaler.transform_states(small_data.states.take(idx)))
    u = rng.random((100, N_CPS))
    _, g = net.head_grad(cov, u)
    for i in range(100):
        fd = finite_difference(lambda v: float(net.head(cov[i:i + 1], v[None])[0]), u[i])
        assert np.max(np.abs(g[i] - fd)) / max(np.max(np.abs(fd)), 1e-8) < 1e-4


# -- training -------------------------------------------------------------------
def test_constant_reward_fit(small_data):
    d = small_data.take(np.arange(64)).with_rows(reward=np.full(64, 7.25))
    d = d.with_rows(reward=d.reward + np.linspace(-1e-9, 1e-9, 64))  # avoid the zero-variance path
    net, hist = rewardnet.train(d, TrainConfig(lr=1e-2, epochs=200, batch_size=64, init_scale=0.5))
    pred = net.predict(d.states, d.action)
    assert np.mean((pred - 7.25) ** 2) < 1e-3


def test_training_deterministic(small_data):
    cfg = TrainConfig(epochs=1, batch_size=64, seed=3)
    a, ha = rewardnet.train(small_data, cfg)
    b, hb = rewardnet.train(small_data, cfg)
    assert ha == hb
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()


def test_nan_loss_aborts(small_data):
    d = small_data.take(np.arange(64))
    with np.errstate(all="ignore"), pytest.raises(rewardnet.TrainingError, match="non-finite"):
        rewardnet.train(d, TrainConfig(lr=1e200, epochs=3, batch_size=32))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


def test_too_small_for_minibatch(small_data):
    with pytest.raises(ValueError, match="minibatch"):
        rewardnet.train(small_data.take(np.arange(10)), TrainConfig(batch_size=64))


@pytest.fixture(scope="module")
def heldout_runs():
    cfg = simnet.SimConfig(n_cells=40, n_days=2, seed=21)
    d = simnet.generate_dataset(cfg)
    train, test = datastore.split(d, 400, seed=0)
    half = train.take(np.arange(0, len(train), 2))
    tc = TrainConfig(lr=2e-3, epochs=8, batch_size=128, init_scale=0.3, seed=1)
    out = {}
    for name, part in (("half", half), ("full", train)):
        net, hist = rewardnet.train(part, tc)
        out[name] = (np.mean((net.predict(test.states, test.action) - test.reward) ** 2), hist)
    return out, np.var(test.reward)


def test_heldout_r2_positive_and_loss_falls(heldout_runs):
    runs, var = heldout_runs
    mse, hist = runs["full"]
    assert 1 - mse / var > 0
    assert hist[-1] < hist[0]


def test_more_data_does_not_hurt(heldout_runs):
    runs, _ = heldout_runs
    assert runs["full"][0] <= 1.10 * runs["half"][0]


# -- ensemble ------------------------------------------------------------------
def constant_member(scaler, value):
    params = {k: np.zeros_like(v) for k, v in rewardnet.init_params(8, 0).items()}
    params["out2_b"] = np.array([value])
    return RewardNet(params, scaler, 24, 8)


def test_population_std(small_data, scaler):
    e = RewardEnsemble([constant_member(scaler, 1.0), constant_member(scaler, 3.0)], [0, 1])
    mu, sigma = e.predict(small_data.states.take([0, 1]), small_data.action[:2])
    np.testing.assert_array_equal(mu, [2.0, 2.0])
    np.testing.assert_array_equal(sigma, [1.0, 1.0])


def test_identical_members_zero_sigma(small_data, scaler):
    m = random_net(scaler, 4)
    e = RewardEnsemble([m, m, m], [4, 4, 4])
    _, sigma = e.predict(small_data.states.take([0, 9]), small_data.action[[0, 9]])
    np.testing.assert_allclose(sigma, 0.0, atol=1e-12)


def test_k1_zero_sigma_and_member_gradient(small_data, scaler):
    m = random_net(scaler, 5)
    e = RewardEnsemble([m], [5])
    s, a = small_data.states.take([1, 2]), small_data.action[[1, 2]]
    _, sigma = e.predict(s, a)
    np.testing.assert_array_equal(sigma, 0.0)
    for beta in (0.0, 1.0, 5.0):
        np.testing.assert_allclose(rewardnet.ensemble_grad_action(e, s, a, beta), m.grad_action(s, a), rtol=1e-12)


def test_same_seed_members_identical(small_data):
    e = rewardnet.ensemble_fit(small_data, 2, TrainConfig(epochs=1, batch_size=64), seeds=[9, 9])
    _, sigma = e.predict(small_data.states.take([0, 3]), small_data.action[[0, 3]])
    np.testing.assert_array_equal(sigma, 0.0)


def test_distinct_members(small_ensemble):
    ws = [m.params["cp_W"] for m in small_ensemble.members]
    assert not np.array_equal(ws[0], ws[1]) and not np.array_equal(ws[1], ws[2])


def test_default_member_seeds_distinct(small_data):
    e = rewardnet.ensemble_fit(small_data.take(np.arange(64)), 5, TrainConfig(epochs=1, batch_size=64))
    assert len(set(e.member_seeds)) == 5
    assert len({m.params["cp_W"].tobytes() for m in e.members}) == 5


def test_mean_matches_member_predictions(small_ensemble, small_data):
    s, a = small_data.states.take(np.arange(0, 200, 7)), small_data.action[0:200:7]
    preds = np.array([m.predict(s, a) for m in small_ensemble.members])
    mu, sigma = rewardnet.ensemble_predict(small_ensemble, s, a)
    np.testing.assert_allclose(mu, preds.mean(axis=0), rtol=0, atol=1e-12)
    np.testing.assert_allclose(sigma, preds.std(axis=0), rtol=0, atol=1e-12)


def test_member_order_invariance(small_ensemble, small_data):
    rev = RewardEnsemble(small_ensemble.members[::-1], small_ensemble.member_seeds[::-1])
    s, a = small_data.states.take([0, 50]), small_data.action[[0, 50]]
    np.testing.assert_allclose(rev.predict(s, a)[0], small_ensemble.predict(s, a)[0], rtol=0, atol=1e-12)


def test_beta_zero_gradient_is_mean_of_members(small_ensemble, small_data):
    s, a = small_data.states.take([3, 30]), small_data.action[[3, 30]]
    g = rewardnet.ensemble_grad_action(small_ensemble, s, a, 0.0)
    mean = np.mean([m.grad_action(s, a) for m in small_ensemble.members], axis=0)
    np.testing.assert_allclose(g, mean, rtol=1e-10, atol=1e-13)


def test_two_member_linearity(small_data, scaler):
    m1, m2 = random_net(scaler, 6), random_net(scaler, 7)
    e = RewardEnsemble([m1, m2], [6, 7])
    s, a = small_data.states.take([8]), small_data.action[[8]]
    np.testing.assert_allclose(
        rewardnet.ensemble_grad_action(e, s, a, 0.0), (m1.grad_action(s, a) + m2.grad_action(s, a)) / 2, rtol=1e-12
    )


def test_penalized_gradient_matches_fd(small_ensemble, small_data):
    rng = np.random.default_rng(8)
    e = small_ensemble
    idx = rng.choice(len(small_data), 100, replace=False)
    ctx = e.prepare(small_data.states.take(idx))
    u = rng.random((100, N_CPS))
    _, g, _, _ = e.objective_grad(ctx, u, 1.0)
    for i in range(100):
        row = ctx.row(i)
        f = lambda v: float(e.objective_grad(row, v[None], 1.0)[0][0])  # noqa: E731
        fd = finite_difference(f, u[i])
        assert np.max(np.abs(g[i] - fd)) / max(np.max(np.abs(fd)), 1e-8) < 1e-4


def test_zero_sigma_penalty_gradient_is_zero(small_data, scaler):
    m = random_net(scaler, 3)
    e = RewardEnsemble([m, m], [3, 3])
    s, a = small_data.states.take([0]), small_data.action[[0]]
    g0 = rewardnet.ensemble_grad_action(e, s, a, 0.0)
    g5 = rewardnet.ensemble_grad_action(e, s, a, 5.0)
    assert np.all(np.isfinite(g5))
    np.testing.assert_allclose(g5, g0, atol=1e-10)


def test_negative_beta_rejected(small_ensemble, small_data):
    with pytest.raises(ValueError):
        rewardnet.ensemble_grad_action(small_ensemble, small_data.states.take([0]), small_data.action[[0]], -1.0)


def test_fused_head_matches_tape(small_ensemble, small_data, rng):
    e = small_ensemble
    ctx = e.prepare(small_data.states.take(np.arange(20)))
    u = rng.random((20, N_CPS))
    y1, g1 = e.member_grads(ctx, u)
    y2, g2 = e.tape_member_grads(ctx, u)
    np.testing.assert_allclose(y1, y2, rtol=0, atol=1e-12)
    np.testing.assert_allclose(g1, g2, rtol=0, atol=1e-12)
    for beta in (0.0, 2.0):
        a = e.objective_grad(ctx, u, beta)
        b = e.objective_grad(ctx, u, beta, grads=e.tape_member_grads)
        for x, y in zip(a, b):
            np.testing.assert_allclose(x, y, rtol=0, atol=1e-12)


def test_query_counter(small_ensemble, small_data):
    before = small_ensemble.queries
    ctx = small_ensemble.prepare(small_data.states.take([0]))
    small_ensemble.objective_grad(ctx, np.full((1, N_CPS), 0.5), 0.0)
    assert small_ensemble.queries == before + 2


# -- checkpoints -----------------------------------------------------------------
def test_checkpoint_round_trip(small_ensemble, small_data, tmp_path):
    rewardnet.save_ensemble(small_ensemble, tmp_path / "ck")
    back = rewardnet.load_ensemble(tmp_path / "ck")
    s, a = small_data.states.take([0, 77]), small_data.action[[0, 77]]
    for x, y in zip(back.predict(s, a), small_ensemble.predict(s, a)):
        assert x.tobytes() == y.tobytes()
    assert back.member_seeds == small_ensemble.member_seeds
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    assert manifest["architecture"]["hidden"] == 50 and manifest["schema_version"] == 1


def test_checkpoint_tamper_detected(small_ensemble, tmp_path):
    rewardnet.save_ensemble(small_ensemble, tmp_path / "ck")
    blob = tmp_path / "ck" / "params.bin"
    data = bytearray(blob.read_bytes())
    data[100] ^= 0xFF
    blob.write_bytes(bytes(data))
    with pytest.raises(ValueError, match="hash"):
        rewardnet.load_ensemble(tmp_path / "ck")


def test_checkpoint_schema_and_kind_checked(small_ensemble, tmp_path):
    rewardnet.save_ensemble(small_ensemble, tmp_path / "ck")
    m = tmp_path / "ck" / "manifest.json"
    doc = json.loads(m.read_text())
    m.write_text(json.dumps(dict(doc, kind="policy")))
    with pytest.raises(ValueError, match="expected"):
        rewardnet.load_ensemble(tmp_path / "ck")
    m.write_text(json.dumps(dict(doc, schema_version=2)))
    with pytest.raises(ValueError, match="schema"):
        rewardnet.load_ensemble(tmp_path / "ck")


def test_frozen_checkpoint_still_loads(tmp_path):
    # written by an earlier build with the same schema version
    src = FIXTURES / "reward_v1"
    shutil.copytree(src, tmp_path / "ck")
    e = rewardnet.load_ensemble(tmp_path / "ck")
    expected = json.loads((src / "expected.json").read_text())
    d = simnet.generate_dataset(simnet.SimConfig(**expected["sim"]))
    mu, sigma = e.predict(d.states.take(expected["rows"]), d.action[expected["rows"]])
    np.testing.assert_allclose(mu, expected["mu"], rtol=0, atol=1e-12)
    np.testing.assert_allclose(sigma, expected["sigma"], rtol=0, atol=1e-12)
