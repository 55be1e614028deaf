"""Truncated-Gaussian policy network, truncated off-policy gradient, IPS and DM.

The policy maps cheap state features (time, EPs and the per-counter window
mean, standardized) through ``affine(64) -> tanh`` to per-CP means
``sigmoid(affine(14))`` in box coordinates.  Each CP is an independent
Gaussian truncated to [0, 1] with a learned, state-free standard deviation.
Densities are reported in raw CP units (the box Jacobian is included), which
is the convention the logged propensities use.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from . import truncnorm
from .datastore import Dataset
from .domain import CP_BOX, N_CPS, Box, StateBatch
from .ndmath import Tape
from .rewardnet import SCHEMA_VERSION, RewardEnsemble, _Adam, _read_checkpoint, _write_checkpoint

logger = logging.getLogger(__name__)

TRUNK = 64
STD_MIN, STD_MAX = 1e-3, 1.0
QUANTILES = (5, 25, 50, 75, 95)


class PolicyError(RuntimeError):
    pass


def state_features(states: StateBatch) -> np.ndarray:
    """Unscaled policy inputs: time, EPs and per-counter window means."""
    return np.concatenate([states.time, states.ep, states.counters.mean(axis=1)], axis=1)


def param_shapes(n_features: int) -> Dict[str, Tuple[int, ...]]:
    return {
        "trunk_W": (n_features, TRUNK),
        "trunk_b": (TRUNK,),
        "mean_W": (TRUNK, N_CPS),
        "mean_b": (N_CPS,),
        "log_std": (N_CPS,),
    }


def build_mean_tape() -> Tape:
    t = Tape()
    p = {n: t.input(n) for n in ("trunk_W", "trunk_b", "mean_W", "mean_b")}
    hidden = t.tanh(t.affine(t.input("x"), p["trunk_W"], p["trunk_b"]), label="trunk")
    t.set_output(t.sigmoid(t.affine(hidden, p["mean_W"], p["mean_b"]), label="mean"))
    return t


class PolicyNet:
    """A trained or initial policy; ``feat_mean``/``feat_std`` standardize inputs."""

    def __init__(self, params: Dict[str, np.ndarray], feat_mean: np.ndarray, feat_std: np.ndarray, box: Box = CP_BOX):
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.feat_mean = np.asarray(feat_mean, dtype=np.float64)
        self.feat_std = np.asarray(feat_std, dtype=np.float64)
        self.box = box
        self._tape = build_mean_tape()

    @property
    def n_features(self) -> int:
        return self.feat_mean.shape[0]

    def features(self, states: StateBatch) -> np.ndarray:
        x = state_features(states)
        if x.shape[1] != self.n_features:
            raise ValueError(f"policy expects {self.n_features} state features, got {x.shape[1]}")
        return (x - self.feat_mean) / self.feat_std

    @property
    def std(self) -> np.ndarray:
        return np.clip(np.exp(self.params["log_std"]), STD_MIN, STD_MAX)

    def mean_normalized(self, states: StateBatch) -> np.ndarray:
        b = dict(self.params, x=self.features(states))
        b.pop("log_std")
        return self._tape.eval(b)

    def sample_normalized(self, states: StateBatch, rng) -> np.ndarray:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        return truncnorm.sample(self.mean_normalized(states), self.std, rng)

    def sample(self, states: StateBatch, rng) -> np.ndarray:
        """Raw CP actions, one per state; ``rng`` may be a seed."""
        return self.box.denormalize(self.sample_normalized(states, rng))

    def log_density(self, states: StateBatch, actions: np.ndarray) -> np.ndarray:
        """Raw-unit log density; ``-inf`` for actions outside the box."""
        u = self.box.normalize(np.atleast_2d(actions))
        lp = np.sum(truncnorm.logpdf(u, self.mean_normalized(states), self.std), axis=1)
        return lp - self.box.log_volume

    def density(self, states: StateBatch, actions: np.ndarray) -> np.ndarray:
        return np.exp(self.log_density(states, actions))


def init_policy(d: Dataset, seed: int = 0, init_scale: float = 1.0) -> PolicyNet:
    """Random trunk with the mean head and std matched to the logged actions.

    Starting close to the logging policy keeps the first importance ratios
    near one.
    """
    x = state_features(d.states)
    mu, sd = x.mean(axis=0), x.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    rng = np.random.default_rng([seed, 0x9A1])
    shapes = param_shapes(x.shape[1])
    params = {}
    for name, shape in shapes.items():
        if name.endswith("_W"):
            params[name] = rng.normal(0.0, init_scale / np.sqrt(shape[0]), size=shape)
        else:
            params[name] = np.zeros(shape)
    params["mean_W"] *= 0.1
    u = np.clip(d.box.normalize(d.action), 1e-3, 1.0 - 1e-3)
    m = u.mean(axis=0)
    params["mean_b"] = np.log(m / (1.0 - m))
    params["log_std"] = np.log(np.clip(u.std(axis=0), STD_MIN, STD_MAX))
    return PolicyNet(params, mu, sd, d.box)


# ----------------------------------------------------------------------
# estimators
def importance_ratios(d: Dataset, policy) -> np.ndarray:
    """``policy(a|s) / propensity`` per row; ``policy`` needs ``density(states, actions)``."""
    if np.any(d.propensity <= 0):
        bad = int(np.flatnonzero(d.propensity <= 0)[0])
        raise ValueError(f"non-positive propensity at row {bad}")
    return policy.density(d.states, d.action) / d.propensity


def ips_estimate(d: Dataset, policy) -> Tuple[float, float]:
    """Inverse-propensity value of ``policy`` on the factual rows of ``d``.

    Returns ``(J, var)`` where ``var`` is the empirical variance of the
    weighted terms.  With the logging policy itself every weight is exactly 1.
    """
    d = d.factual()
    if len(d) == 0:
        raise ValueError("IPS needs at least one factual row")
    terms = importance_ratios(d, policy) * d.reward
    return float(np.mean(terms)), float(np.var(terms))


def truncated_ips(d: Dataset, policy, M: float) -> float:
    """``mean(min(ratio, M) * r)`` over the factual rows."""
    d = d.factual()
    return float(np.mean(truncated_weights(importance_ratios(d, policy), M) * d.reward))


@dataclass
class OPPGConfig:
    M: float = 5.0
    lr: float = 1e-3
    epochs: int = 15
    batch_size: int = 256
    baseline: bool = False
    seed: int = 0
    init_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.M > 0:
            raise ValueError("OPPGConfig.M must be > 0")
        if self.lr < 0:
            raise ValueError("OPPGConfig.lr must be >= 0")
        if self.epochs < 1:
            raise ValueError("OPPGConfig.epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("OPPGConfig.batch_size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "OPPGConfig":
        return cls(**d)


def truncated_weights(ratio: np.ndarray, M: float) -> np.ndarray:
    return np.minimum(ratio, M)


def oppg_gradient(batch: Dataset, p: PolicyNet, M: float, baseline: bool = False):
    """Truncated off-policy gradient of ``mean(min(ratio, M) * r * log pi)``.

    The truncated weight is held constant.  Returns ``(grads, weights)``
    with ``grads`` keyed like ``p.params``.
    """
    if np.any(batch.is_hypothetical):
        raise ValueError("OPPG uses factual rows only")
    states = batch.states
    x = p.features(states)
    b = dict(p.params, x=x)
    b.pop("log_std")
    mean = p._tape.eval(b)
    std = p.std
    u = p.box.normalize(batch.action)
    logp = np.sum(truncnorm.logpdf(u, mean, std), axis=1) - p.box.log_volume
    ratio = np.exp(logp) / batch.propensity
    if not np.all(np.isfinite(ratio)):
        bad = int(np.flatnonzero(~np.isfinite(ratio))[0])
        raise PolicyError(f"non-finite importance ratio at row {bad}")
    w = truncated_weights(ratio, M)
    r = batch.reward - batch.reward.mean() if baseline else batch.reward
    coef = (w * r / len(batch))[:, None]
    d_mean, d_std = truncnorm.score(u, mean, std)
    grads = p._tape.grad(["trunk_W", "trunk_b", "mean_W", "mean_b"], seed=coef * d_mean)
    raw = np.exp(p.params["log_std"])
    inside = (raw >= STD_MIN) & (raw <= STD_MAX)
    grads["log_std"] = np.sum(coef * d_std, axis=0) * std * inside
    return grads, w


def train_oppg(d: Dataset, cfg: OPPGConfig, init: Optional[PolicyNet] = None) -> Tuple[PolicyNet, List[float]]:
    """Ascend the truncated IPS objective with minibatch Adam.

    Returns the policy and the truncated IPS objective on ``d`` after every
    epoch.  The plain estimate is a poor progress signal here: with 14
    independent CPs a modest move of the policy already spreads the ratios
    over many orders of magnitude.
    """
    d = d.factual()
    if len(d) < cfg.batch_size:
        raise ValueError(f"dataset of {len(d)} rows is smaller than one minibatch ({cfg.batch_size})")
    p = init or init_policy(d, cfg.seed, cfg.init_scale)
    p = PolicyNet({k: v.copy() for k, v in p.params.items()}, p.feat_mean, p.feat_std, p.box)
    opt = _Adam(p.params, cfg, maximize=True)
    rng = np.random.default_rng([cfg.seed, 0x0B6])
    history: List[float] = []
    n = len(d)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for lo in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            grads, _ = oppg_gradient(d.take(perm[lo:lo + cfg.batch_size]), p, cfg.M, cfg.baseline)
            if cfg.lr > 0:
                opt.step(p.params, grads)
        j = truncated_ips(d, p, cfg.M)
        if not abs(j) <= 1e6:
            raise PolicyError(f"OPPG diverged at epoch {epoch}: IPS estimate {j}")
        history.append(j)
        logger.debug("oppg epoch %d ips %.4f", epoch, j)
    return p, history


def dm_value(e: RewardEnsemble, states: StateBatch, actions: np.ndarray) -> Tuple[np.ndarray, Dict[int, float]]:
    """Ensemble-mean predicted TP per state and its {5, 25, 50, 75, 95} percentiles."""
    values, _ = e.predict(states, actions)
    return values, quantiles(values)


def quantiles(values: np.ndarray) -> Dict[int, float]:
    return {q: float(v) for q, v in zip(QUANTILES, np.percentile(values, QUANTILES))}


# ----------------------------------------------------------------------
# checkpoints
def save_policy(p: PolicyNet, path: Union[str, Path], metadata: Optional[dict] = None) -> None:
    shapes = param_shapes(p.n_features)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "kind": "policy",
        "architecture": {"n_features": p.n_features, "trunk": TRUNK, "n_cps": N_CPS},
        "param_order": [[n, list(s)] for n, s in shapes.items()],
        "feat_mean": p.feat_mean.tolist(),
        "feat_std": p.feat_std.tolist(),
        "box": {"low": p.box.low.tolist(), "high": p.box.high.tolist()},
        "metadata": metadata or {},
    }
    _write_checkpoint(path, manifest, [p.params[n] for n in shapes])


def load_policy(path: Union[str, Path]) -> PolicyNet:
    manifest, flat = _read_checkpoint(path, "policy")
    params, pos = {}, 0
    for name, shape in manifest["param_order"]:
        size = int(np.prod(shape))
        params[name] = flat[pos:pos + size].reshape(shape)
        pos += size
    if pos != flat.size:
        raise ValueError(f"{path}: blob holds {flat.size} values, manifest declares {pos}")
    box = Box(np.array(manifest["box"]["low"]), np.array(manifest["box"]["high"]))
    return PolicyNet(params, np.array(manifest["feat_mean"]), np.array(manifest["feat_std"]), box)
