import numpy as np
import pytest

from cellbandit import datastore, rewardnet, simnet

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def small_sim_config():
    return simnet.SimConfig(n_cells=6, n_days=2, seed=3)


@pytest.fixture(scope="session")
def small_data(small_sim_config):
    return simnet.generate_dataset(small_sim_config)


@pytest.fixture(scope="session")
def small_ensemble(small_data):
    cfg = rewardnet.TrainConfig(epochs=2, batch_size=64, init_scale=0.5)
    return rewardnet.ensemble_fit(small_data, 3, cfg, seeds=[11, 12, 13])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
