"""Synthetic cellular network with a known throughput function.

The simulator stands in for a real operator dataset.  It provides

* a ground-truth throughput ``R(s, a)`` that is smooth, nonconvex in the
  action and has state-dependent maximizers,
* a logging policy with an exactly evaluable density, and
* logged datasets with hourly rows and daily CP changes.

Ground truth, in normalized CP coordinates ``u = (a - low) / (high - low)``::

    TP(s, a) = base(s)
               + sum_i w_i(s) * exp(-(u_i - m_i(s))**2 / (2 * width_i**2))
               + sum_{(i, j) in PAIRS} v_ij * u_i * u_j

with ``m_i(s) = 0.5 + side_i * (0.45 + 0.1 * tanh(A_i . z(s)))``, ``w_i(s) = w0_i * (1 + 0.3 *
tanh(B_i . z(s)))`` and ``base(s) = 10 + tanh(c . z(s)) - 2 * tanh(load(s))``.
``z(s)`` stacks the four time features and the six EPs scaled to [-1, 1];
``load(s)`` is the mean of counter 0 over the last three hours divided by its
nominal level.  The constants (A, B, w0, widths, c, PAIRS, v) come from
``World`` and depend only on ``SimConfig.world_seed``.

Each CP has a preferred side of its range: bump centers sit between 0.85 and
1.05 of the width on that side, so the best in-box setting lies at or near
the bound.  The logging heuristic aims ``logging_offset`` inward of the
center; widths exceed that offset, so logged data shows the upward trend.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import truncnorm
from .domain import (
    CP_BOX,
    EP_HIGH,
    EP_LOW,
    N_CPS,
    N_EP,
    Action,
    CellSpec,
    NetworkState,
    StateBatch,
    time_features,
)

logger = logging.getLogger(__name__)

# stream tags for seed splitting
_NETWORK, _COUNTERS, _ACTION, _NOISE = 1, 2, 3, 4

LOAD_LEVEL = 50.0  # nominal level of counter 0 (active users)
_COUNTER_LEVELS = np.array([LOAD_LEVEL, 220.0, 35.0, 8.0, 1200.0, 0.6, 90.0, 15.0])
_LOAD_WINDOW = 3


@dataclass
class SimConfig:
    n_cells: int = 2945
    n_counters: int = 8
    window: int = 24
    n_days: int = 9
    noise_std: float = 0.5
    seed: int = 0
    world_seed: int = 2021
    # logging policy: centers offset from the optimum by this fraction of the box
    logging_offset: float = 0.3
    logging_std: float = 0.15
    interaction_scale: float = 1.0
    active_cps: Optional[List[int]] = None  # None means all 14 CPs matter

    def __post_init__(self):
        for name in ("n_cells", "n_counters", "window", "n_days"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"SimConfig.{name} must be >= 1")
        if self.noise_std < 0:
            raise ValueError("SimConfig.noise_std must be >= 0")
        if not 0 < self.logging_std <= 1:
            raise ValueError("SimConfig.logging_std must lie in (0, 1]")
        if self.active_cps is not None:
            bad = [i for i in self.active_cps if not 0 <= i < N_CPS]
            if bad:
                raise ValueError(f"active_cps out of range: {bad}")

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown sim config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class World:
    """Fixed constants of the ground-truth reward and logging heuristic."""

    opt_proj: np.ndarray  # (14, 10) -> m_i(s)
    weight_proj: np.ndarray  # (14, 10) -> w_i(s)
    base_proj: np.ndarray  # (10,)
    w0: np.ndarray  # (14,)
    widths: np.ndarray  # (14,)
    pairs: Tuple[Tuple[int, int], ...]
    pair_coef: np.ndarray
    side: np.ndarray  # (14,) +1 when the bump center lies near the upper bound
    log_proj: np.ndarray  # (14, 10) heuristic perturbation


@lru_cache(maxsize=8)
def make_world(world_seed: int) -> World:
    rng = np.random.default_rng([world_seed, 0xC0FFEE])
    opt_proj = rng.normal(0.0, 0.6, size=(N_CPS, 10))
    weight_proj = rng.normal(0.0, 0.6, size=(N_CPS, 10))
    base_proj = rng.normal(0.0, 0.5, size=10)
    w0 = rng.uniform(0.5, 1.2, size=N_CPS)
    widths = rng.uniform(0.2, 0.3, size=N_CPS)
    pairs = ((0, 1), (2, 5), (3, 9), (7, 11), (12, 13))
    pair_coef = rng.choice([-1.0, 1.0], size=len(pairs)) * rng.uniform(0.1, 0.3, size=len(pairs))
    side = rng.choice([-1.0, 1.0], size=N_CPS)
    log_proj = rng.normal(0.0, 0.6, size=(N_CPS, 10))
    return World(opt_proj, weight_proj, base_proj, w0, widths, pairs, pair_coef, side, log_proj)


def _lin(z: np.ndarray, proj: np.ndarray) -> np.ndarray:
    # elementwise product + last-axis sum, not BLAS: results must not depend
    # on batch size (propensities are recomputed on subsets and compared exactly)
    return np.sum(z[:, None, :] * proj[None, :, :], axis=-1)


def state_embedding(states: StateBatch, drop_hour: bool = False) -> np.ndarray:
    """``z(s)``: time features and EPs scaled to [-1, 1], shape ``(N, 10)``."""
    ep = 2.0 * (states.ep - EP_LOW) / (EP_HIGH - EP_LOW) - 1.0
    t = states.time.copy()
    if drop_hour:
        t[:, :2] = 0.0
    return np.concatenate([t, ep], axis=1)


class Simulator:
    """Ground-truth reward and logging policy for one ``SimConfig``."""

    def __init__(self, config: SimConfig):
        self.config = config
        self.world = make_world(config.world_seed)
        self.box = CP_BOX
        active = np.zeros(N_CPS, dtype=bool)
        active[list(range(N_CPS)) if config.active_cps is None else config.active_cps] = True
        self.active = active
        keep = [k for k, (i, j) in enumerate(self.world.pairs) if active[i] and active[j]]
        self.pairs = [self.world.pairs[k] for k in keep]
        self.pair_coef = config.interaction_scale * self.world.pair_coef[keep]

    # -- ground truth -------------------------------------------------------
    def optimum_location(self, states: StateBatch) -> np.ndarray:
        """Per-CP bump centers ``m_i(s)`` in normalized coordinates (may leave [0, 1])."""
        return self._center(state_embedding(states))

    def _center(self, z: np.ndarray) -> np.ndarray:
        return 0.5 + self.world.side * (0.45 + 0.1 * np.tanh(_lin(z, self.world.opt_proj)))

    def bump_weights(self, states: StateBatch) -> np.ndarray:
        z = state_embedding(states)
        w = self.world.w0 * (1.0 + 0.3 * np.tanh(_lin(z, self.world.weight_proj)))
        return w * self.active

    def base(self, states: StateBatch) -> np.ndarray:
        z = state_embedding(states)
        load = states.counters[:, -_LOAD_WINDOW:, 0].mean(axis=1) / LOAD_LEVEL
        return 10.0 + np.tanh(z @ self.world.base_proj) - 2.0 * np.tanh(load)

    def true_reward_batch(
        self, states: StateBatch, actions: np.ndarray, rng: Optional[np.random.Generator] = None
    ) -> np.ndarray:
        """Throughput for each (state, raw action) row, noisy when ``rng`` is given."""
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        inside = self.box.contains(actions)
        if not np.all(inside):
            bad = int(np.flatnonzero(~inside)[0])
            raise ValueError(f"action outside the CP box at row {bad}")
        u = self.box.normalize(actions)
        m = self.optimum_location(states)
        w = self.bump_weights(states)
        tp = self.base(states) + np.sum(w * np.exp(-((u - m) ** 2) / (2.0 * self.world.widths**2)), axis=1)
        for (i, j), v in zip(self.pairs, self.pair_coef):
            tp = tp + v * u[:, i] * u[:, j]
        if rng is not None and self.config.noise_std > 0:
            tp = tp + rng.normal(0.0, self.config.noise_std, size=tp.shape)
        return tp

    def analytic_optimum(self, states: StateBatch) -> np.ndarray:
        """Raw maximizer of the noiseless reward; exact only without interactions.

        Each bump is unimodal, so the in-box maximizer is the clipped center.
        """
        if len(self.pairs) and np.any(self.pair_coef != 0):
            raise ValueError("the maximizer is only known in closed form when interactions are off")
        return self.box.denormalize(np.clip(self.optimum_location(states), 0.0, 1.0))

    # -- logging policy -----------------------------------------------------
    def logging_center(self, states: StateBatch) -> np.ndarray:
        """Heuristic CP centers (normalized); uses only daily-constant features."""
        cfg, w = self.config, self.world
        zd = state_embedding(states, drop_hour=True)
        c = self._center(zd) - cfg.logging_offset * w.side + 0.05 * np.tanh(_lin(zd, w.log_proj))
        return np.clip(c, 0.03, 0.97)

    def logging_policy(self) -> "LoggingPolicy":
        return LoggingPolicy(self)


class LoggingPolicy:
    """Independent truncated Gaussians per CP around a suboptimal heuristic.

    The center ignores the hour and the counters, so an action held for a
    whole day has the same density in every hourly row of that day.
    """

    def __init__(self, sim: Simulator, offset: Optional[float] = None, std: Optional[float] = None):
        if offset is not None or std is not None:
            cfg = replace(
                sim.config,
                logging_offset=sim.config.logging_offset if offset is None else offset,
                logging_std=sim.config.logging_std if std is None else std,
            )
            sim = Simulator(cfg)
        self.sim = sim
        self.box = sim.box
        self.std = sim.config.logging_std

    def sample(self, states: StateBatch, rng: np.random.Generator) -> np.ndarray:
        c = self.sim.logging_center(states)
        return self.box.denormalize(truncnorm.sample(c, self.std, rng))

    def log_density(self, states: StateBatch, actions: np.ndarray) -> np.ndarray:
        u = self.box.normalize(actions)
        c = self.sim.logging_center(states)
        return np.sum(truncnorm.logpdf(u, c, self.std), axis=1) - self.box.log_volume

    def density(self, states: StateBatch, actions: np.ndarray) -> np.ndarray:
        return np.exp(self.log_density(states, actions))


# ----------------------------------------------------------------------
# network and dataset generation
def generate_network(config: SimConfig) -> List[CellSpec]:
    rng = np.random.default_rng([config.seed, _NETWORK])
    ep = rng.uniform(EP_LOW, EP_HIGH, size=(config.n_cells, N_EP))
    loc = rng.uniform(0.0, 20.0, size=(config.n_cells, 2))
    return [CellSpec(i, ep[i], (float(loc[i, 0]), float(loc[i, 1]))) for i in range(config.n_cells)]


def _season(hour: np.ndarray) -> np.ndarray:
    h = 2.0 * np.pi * hour / 24.0
    return 1.0 + 0.4 * np.sin(h - 2.0 * np.pi * 9 / 24) + 0.15 * np.sin(2.0 * h - 1.0)


def counter_series(config: SimConfig, cell_id: int) -> np.ndarray:
    """Hourly counters for one cell, shape ``(window - 1 + 24 * n_days, C)``.

    Row ``window - 1 + 24 * d + h`` is the value at hour ``h`` of day ``d``;
    earlier rows are burn-in history.  Load follows an AR(1) process in log
    space on top of a time-of-day profile.
    """
    rng = np.random.default_rng([config.seed, _COUNTERS, cell_id])
    C, T = config.n_counters, config.window
    n = T - 1 + 24 * config.n_days
    levels = np.resize(_COUNTER_LEVELS, C) * np.exp(rng.normal(0.0, 0.35, size=C))
    gamma = np.resize(np.array([1.0, 1.0, 0.7, 1.3, 0.9, 0.2, 1.1, 0.5]), C)
    hours = (np.arange(n) - (T - 1)) % 24
    eps = rng.normal(0.0, 0.15, size=n)
    y = np.empty(n)
    prev = rng.normal(0.0, 0.25)
    for t in range(n):
        prev = 0.8 * prev + eps[t]
        y[t] = prev
    season = _season(hours)[:, None]
    jitter = rng.normal(0.0, 0.05, size=(n, C))
    return levels * season**gamma * np.exp(y[:, None] + jitter)


def generate_dataset(config: SimConfig, cells: Optional[Sequence[CellSpec]] = None, policy=None):
    """Logged dataset: one action per cell and day, one row per hour.

    ``policy`` defaults to the logging policy and must expose ``sample`` and
    ``density`` over ``StateBatch`` objects.
    """
    from .datastore import Dataset

    sim = Simulator(config)
    policy = sim.logging_policy() if policy is None else policy
    cells = generate_network(config) if cells is None else cells
    T = config.window
    hours = np.arange(24)
    rows = {k: [] for k in ("cell_id", "day", "hour", "time", "ep", "counters", "action", "reward")}
    for cell in cells:
        series = counter_series(config, cell.cell_id)
        for day in range(config.n_days):
            ends = T - 1 + 24 * day + hours
            windows = np.stack([series[e - T + 1:e + 1] for e in ends])
            tf = time_features(hours, day)
            ep = np.broadcast_to(cell.ep, (24, N_EP)).copy()
            states = StateBatch(tf, ep, windows)
            # the day's CP change is decided from the midnight state
            a = policy.sample(states.take([0]), np.random.default_rng([config.seed, _ACTION, cell.cell_id, day]))
            actions = np.repeat(a, 24, axis=0)
            noise_rng = np.random.default_rng([config.seed, _NOISE, cell.cell_id, day])
            rows["cell_id"].append(np.full(24, cell.cell_id))
            rows["day"].append(np.full(24, day))
            rows["hour"].append(hours)
            rows["time"].append(tf)
            rows["ep"].append(ep)
            rows["counters"].append(windows)
            rows["action"].append(actions)
            rows["reward"].append(sim.true_reward_batch(states, actions, noise_rng))
    cat = {k: np.concatenate(v) for k, v in rows.items()}
    states = StateBatch(cat["time"], cat["ep"], cat["counters"])
    propensity = policy.density(states, cat["action"])
    return Dataset(
        cell_id=cat["cell_id"],
        day=cat["day"],
        hour=cat["hour"],
        time=cat["time"],
        ep=cat["ep"],
        counters=cat["counters"],
        action=cat["action"],
        reward=cat["reward"],
        propensity=propensity,
        is_hypothetical=np.zeros(len(cat["reward"]), dtype=bool),
        box=sim.box,
    )


# ----------------------------------------------------------------------
# single-item conveniences
def true_reward(
    state: NetworkState, action: Action, noise_seed: Optional[int] = None, config: Optional[SimConfig] = None
) -> float:
    sim = Simulator(config or SimConfig())
    rng = None if noise_seed is None else np.random.default_rng(noise_seed)
    return float(sim.true_reward_batch(StateBatch.from_state(state), action.cp[None], rng)[0])


def logging_policy(
    state: NetworkState, rng: Optional[np.random.Generator] = None, config: Optional[SimConfig] = None
) -> Tuple[Action, float]:
    """Draw one logged action for ``state`` and return it with its density."""
    pol = Simulator(config or SimConfig()).logging_policy()
    sb = StateBatch.from_state(state)
    a = pol.sample(sb, rng if rng is not None else np.random.default_rng())
    return Action(a[0]), float(pol.density(sb, a)[0])
