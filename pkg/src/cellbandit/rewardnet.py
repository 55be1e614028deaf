"""Modular throughput model and its bootstrap ensemble.

Architecture (all representation widths 50)::

    time (4)  -> affine -> tanh --.
    EP (6)    -> affine -> tanh ---+-> concat(150) -> affine -> tanh = covariates (50)
    counters  -> GRU, last hidden -'                                    |
    CPs (14)  -> affine -> tanh ----------------------------------------+-> concat(100)
                                                  -> affine(50) -> relu -> affine(1)

The network is split into two tapes: a covariate tape that does not see the
action, and a head tape that joins the CP representation with the
covariates.  Gradient ascent on actions only re-runs the head.

Inputs are standardized with the :class:`~cellbandit.datastore.Standardizer`
stored on the model; actions enter in [0, 1] box coordinates.  Training runs
on standardized rewards and the reward scale is folded into the last layer
afterwards, so :meth:`RewardNet.head` returns throughput in raw units.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time as _time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .datastore import Dataset, Standardizer, bootstrap_sample, fit_standardizer
from .domain import N_CPS, N_EP, N_TIME, StateBatch
from .ndmath import Tape

logger = logging.getLogger(__name__)

HIDDEN = 50
SCHEMA_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 256
    init_scale: float = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("TrainConfig.lr must be positive")
        if self.epochs < 1:
            raise ValueError("TrainConfig.epochs must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def param_shapes(n_counters: int) -> Dict[str, Tuple[int, ...]]:
    """Parameter names and shapes in checkpoint order."""
    H, C = HIDDEN, n_counters
    return {
        "time_W": (N_TIME, H), "time_b": (H,),
        "ep_W": (N_EP, H), "ep_b": (H,),
        "gru_Wg": (C + H, 2 * H), "gru_bg": (2 * H,),
        "gru_Wc": (C + H, H), "gru_bc": (H,),
        "cov_W": (3 * H, H), "cov_b": (H,),
        "cp_W": (N_CPS, H), "cp_b": (H,),
        "out1_W": (2 * H, H), "out1_b": (H,),
        "out2_W": (H, 1), "out2_b": (1,),
    }


COV_PARAMS = ("time_W", "time_b", "ep_W", "ep_b", "gru_Wg", "gru_bg", "gru_Wc", "gru_bc", "cov_W", "cov_b")
HEAD_PARAMS = ("cp_W", "cp_b", "out1_W", "out1_b", "out2_W", "out2_b")


def init_params(n_counters: int, seed: int, scale: float = 1.0) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 0x1417])
    params = {}
    for name, shape in param_shapes(n_counters).items():
        if name.endswith("_b") or name.endswith("_bg") or name.endswith("_bc"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, scale / np.sqrt(shape[0]), size=shape)
    return params


# ----------------------------------------------------------------------
# graph construction
def gru_step(t: Tape, x: int, h: int, p: Dict[str, int], tag: str) -> int:
    """One GRU step: ``h' = (1 - z) * h + z * tanh(W [x, r * h] + b)``."""
    gates = t.sigmoid(t.affine(t.concat([x, h]), p["gru_Wg"], p["gru_bg"]), label=f"gates{tag}")
    z = t.slice(gates, 0, HIDDEN, label=f"z{tag}")
    r = t.slice(gates, HIDDEN, 2 * HIDDEN, label=f"r{tag}")
    cand = t.tanh(t.affine(t.concat([x, t.mul(r, h)]), p["gru_Wc"], p["gru_bc"]), label=f"cand{tag}")
    return t.add(h, t.mul(z, t.sub(cand, h)), label=f"h{tag}")


def _build_covariates(t: Tape, window: int, p: Dict[str, int]) -> int:
    time_rep = t.tanh(t.affine(t.input("time"), p["time_W"], p["time_b"]), label="time_rep")
    ep_rep = t.tanh(t.affine(t.input("ep"), p["ep_W"], p["ep_b"]), label="ep_rep")
    xs = [t.input(f"ctr_{i}") for i in range(window)]
    h = t.input("h0")
    for i, x in enumerate(xs):
        h = gru_step(t, x, h, p, tag=f"_{i}")
    ctr_rep = h
    merged = t.concat([time_rep, ep_rep, ctr_rep], label="cov_in")
    return t.tanh(t.affine(merged, p["cov_W"], p["cov_b"]), label="covariates")


def _build_head(t: Tape, cov: int, p: Dict[str, int]) -> int:
    cp_rep = t.tanh(t.affine(t.input("action"), p["cp_W"], p["cp_b"]), label="cp_rep")
    joint = t.concat([cov, cp_rep], label="joint")
    hidden = t.relu(t.affine(joint, p["out1_W"], p["out1_b"]), label="out_hidden")
    return t.affine(hidden, p["out2_W"], p["out2_b"], label="prediction")


def _param_inputs(t: Tape, names: Sequence[str]) -> Dict[str, int]:
    return {n: t.input(n) for n in names}


def build_covariate_tape(window: int) -> Tape:
    t = Tape()
    p = _param_inputs(t, COV_PARAMS)
    t.set_output(_build_covariates(t, window, p))
    return t


def build_head_tape() -> Tape:
    t = Tape()
    p = _param_inputs(t, HEAD_PARAMS)
    t.set_output(_build_head(t, t.input("covariates"), p))
    return t


def build_training_tape(window: int) -> Tape:
    """Full network followed by a mean-squared-error loss against ``target``."""
    t = Tape()
    p = _param_inputs(t, COV_PARAMS + HEAD_PARAMS)
    pred = _build_head(t, _build_covariates(t, window, p), p)
    t.set_output(t.sq_error(pred, t.input("target"), label="loss"))
    return t


def _state_bindings(states: StateBatch) -> Dict[str, np.ndarray]:
    b = {"time": states.time, "ep": states.ep, "h0": np.zeros((len(states), HIDDEN))}
    for i in range(states.counters.shape[1]):
        b[f"ctr_{i}"] = states.counters[:, i, :]
    return b


# ----------------------------------------------------------------------
# single model
class RewardNet:
    """One trained (or freshly initialized) modular reward network."""

    def __init__(self, params: Dict[str, np.ndarray], scaler: Standardizer, window: int, n_counters: int):
        self.params = params
        self.scaler = scaler
        self.window = window
        self.n_counters = n_counters
        self._cov_tape = build_covariate_tape(window)
        self._head_tape = build_head_tape()

    # -- low level: standardized states, [0, 1] actions ---------------------
    def covariates(self, states_std: StateBatch) -> np.ndarray:
        b = _state_bindings(states_std)
        b.update({n: self.params[n] for n in COV_PARAMS})
        return self._cov_tape.eval(b)

    def head(self, cov: np.ndarray, u: np.ndarray) -> np.ndarray:
        b = {n: self.params[n] for n in HEAD_PARAMS}
        b["covariates"] = cov
        b["action"] = np.asarray(u, dtype=np.float64)
        return self._head_tape.eval(b)[..., 0]

    def head_grad(self, cov: np.ndarray, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Predictions and per-row action gradients for a batch."""
        pred = self.head(cov, u)
        g = self._head_tape.grad(["action"], seed=np.ones(pred.shape + (1,)))["action"]
        return pred, g

    # -- raw-unit conveniences ---------------------------------------------
    def predict(self, states: StateBatch, actions: np.ndarray) -> np.ndarray:
        cov = self.covariates(self.scaler.transform_states(states))
        return self.head(cov, self.scaler.normalize_action(actions))

    def grad_action(self, states: StateBatch, actions: np.ndarray) -> np.ndarray:
        """Gradient of the prediction with respect to the [0, 1] action."""
        cov = self.covariates(self.scaler.transform_states(states))
        return self.head_grad(cov, self.scaler.normalize_action(actions))[1]


def predict(m: RewardNet, states_std: StateBatch, u: np.ndarray) -> np.ndarray:
    """R-hat for standardized states and normalized actions."""
    _check_dims(m, states_std, u)
    return m.head(m.covariates(states_std), u)


def grad_action(m: RewardNet, states_std: StateBatch, u: np.ndarray) -> np.ndarray:
    _check_dims(m, states_std, u)
    return m.head_grad(m.covariates(states_std), u)[1]


def _check_dims(m: RewardNet, states: StateBatch, u: np.ndarray) -> None:
    if states.counters.shape[1:] != (m.window, m.n_counters):
        raise ValueError(
            f"counter window {states.counters.shape[1:]} does not match the model ({m.window}, {m.n_counters})"
        )
    if np.shape(u)[-1] != N_CPS:
        raise ValueError(f"actions must have {N_CPS} columns")


# ----------------------------------------------------------------------
# training
class _Adam:
    def __init__(self, params: Dict[str, np.ndarray], cfg: TrainConfig, maximize: bool = False):
        self.cfg = cfg
        self.sign = 1.0 if maximize else -1.0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for k, g in grads.items():
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * g * g
            params[k] = params[k] + self.sign * c.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + c.eps)


def train(
    d: Dataset, cfg: TrainConfig, scaler: Optional[Standardizer] = None
) -> Tuple[RewardNet, List[float]]:
    """Fit one network by minibatch Adam on mean squared error.

    ``d`` holds raw features; it is standardized with ``scaler`` (fitted on
    ``d`` when omitted).  Returns the model and per-epoch mean training loss
    in standardized reward units.
    """
    if len(d) < cfg.batch_size:
        raise ValueError(f"dataset of {len(d)} rows is smaller than one minibatch ({cfg.batch_size})")
    scaler = scaler or fit_standardizer(d)
    states = scaler.transform_states(d.states)
    u = scaler.normalize_action(d.action)
    y = scaler.transform_reward(d.reward)[:, None]
    T, C = d.window, d.n_counters
    params = init_params(C, cfg.seed, cfg.init_scale)
    tape = build_training_tape(T)
    opt = _Adam(params, cfg)
    rng = np.random.default_rng([cfg.seed, 0x7A1])
    names = list(params)
    history: List[float] = []
    n = len(d)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for lo in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            b = _state_bindings(states.take(idx))
            b.update(params)
            b["action"] = u[idx]
            b["target"] = y[idx]
            loss = float(tape.eval(b))
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {lo}")
            opt.step(params, tape.grad(names))
            total += loss * len(idx)
        history.append(total / ((n // cfg.batch_size) * cfg.batch_size))
        logger.debug("epoch %d loss %.5f", epoch, history[-1])
    # fold the reward scaling into the output layer so predictions are raw TP
    params["out2_W"] = params["out2_W"] * scaler.reward_std
    params["out2_b"] = params["out2_b"] * scaler.reward_std + scaler.reward_mean
    return RewardNet(params, scaler, T, C), history


# ----------------------------------------------------------------------
# ensemble
@dataclass
class EnsembleContext:
    """Per-member state representations for a batch of states.

    ``pre`` caches the covariate half of the first output layer,
    ``cov @ out1_W[:50] + out1_b``, which does not depend on the action.
    """

    cov: np.ndarray  # (K, B, 50)
    pre: np.ndarray  # (K, B, 50)

    def row(self, i: int) -> "EnsembleContext":
        return EnsembleContext(self.cov[:, i:i + 1], self.pre[:, i:i + 1])


class RewardEnsemble:
    """K identically shaped members evaluated together on stacked parameters.

    ``queries`` counts every call that touches member outputs; the benchmark
    uses it to prove which ensemble each phase consulted.

    Action-side evaluation (``member_outputs``, ``member_grads``) runs a fused
    numpy version of the head; ``tape_member_grads`` is the same computation
    on the autodiff tape and serves as its reference.
    """

    def __init__(self, members: Sequence[RewardNet], member_seeds: Sequence[int], metadata: Optional[dict] = None):
        if not members:
            raise ValueError("an ensemble needs at least one member")
        first = members[0]
        for m in members[1:]:
            if (m.window, m.n_counters) != (first.window, first.n_counters):
                raise ValueError("ensemble members must share one architecture")
        self.members = list(members)
        self.member_seeds = list(member_seeds)
        self.metadata = dict(metadata or {})
        self.scaler = first.scaler
        self.window = first.window
        self.n_counters = first.n_counters
        self.queries = 0
        self._stack = {}
        for name in param_shapes(self.n_counters):
            arr = np.stack([m.params[name] for m in self.members])
            if arr.ndim == 2:  # biases get a batch axis to broadcast over rows
                arr = arr[:, None, :]
            self._stack[name] = arr
        st = self._stack
        self._w1_cov = st["out1_W"][:, :HIDDEN]
        self._w1_cp = st["out1_W"][:, HIDDEN:]
        # transposes for the backward pass
        self._w2_t = np.swapaxes(st["out2_W"], 1, 2)
        self._w1_cp_t = np.swapaxes(self._w1_cp, 1, 2)
        self._cp_w_t = np.swapaxes(st["cp_W"], 1, 2)
        self._cov_tape = build_covariate_tape(self.window)
        self._head_tape = build_head_tape()

    @property
    def K(self) -> int:
        return len(self.members)

    def prepare(self, states: StateBatch) -> EnsembleContext:
        self.queries += 1
        b = _state_bindings(self.scaler.transform_states(states))
        b.update({n: self._stack[n] for n in COV_PARAMS})
        cov = self._cov_tape.eval(b)
        return EnsembleContext(cov, cov @ self._w1_cov + self._stack["out1_b"])

    def _forward(self, ctx: EnsembleContext, u: np.ndarray):
        st = self._stack
        cp = np.tanh(u @ st["cp_W"] + st["cp_b"])
        z = cp @ self._w1_cp + ctx.pre
        y = np.maximum(z, 0.0) @ st["out2_W"] + st["out2_b"]
        return cp, z, y[..., 0]

    def member_outputs(self, ctx: EnsembleContext, u: np.ndarray) -> np.ndarray:
        """Member predictions, shape (K, B)."""
        self.queries += 1
        return self._forward(ctx, np.asarray(u, dtype=np.float64))[2]

    def member_grads(self, ctx: EnsembleContext, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Member predictions (K, B) and action gradients (K, B, 14)."""
        self.queries += 1
        cp, z, y = self._forward(ctx, np.asarray(u, dtype=np.float64))
        g = np.where(z > 0.0, self._w2_t, 0.0) @ self._w1_cp_t
        g = (g * (1.0 - cp * cp)) @ self._cp_w_t
        return y, g

    def tape_member_grads(self, ctx: EnsembleContext, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """``member_grads`` evaluated on the autodiff tape."""
        self.queries += 1
        # one action copy per member keeps member gradients separate
        u = np.broadcast_to(np.asarray(u, dtype=np.float64), (self.K,) + np.shape(u)[-2:])
        b = {n: self._stack[n] for n in HEAD_PARAMS}
        b["covariates"] = ctx.cov
        b["action"] = u
        preds = self._head_tape.eval(b)
        g = self._head_tape.grad(["action"], seed=np.ones(preds.shape))["action"]
        return preds[..., 0], g

    def mean_std(self, ctx: EnsembleContext, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        preds = self.member_outputs(ctx, u)
        mu = preds.mean(axis=0)
        sigma = np.sqrt(np.mean((preds - mu) ** 2, axis=0))
        return mu, sigma

    def objective_grad(self, ctx: EnsembleContext, u: np.ndarray, beta: float, grads=None):
        """``mu - beta * sigma`` and its action gradient, per row.

        Returns ``(objective, grad, mu, sigma)``.  Where ``sigma == 0`` the
        penalty contributes no gradient.  ``grads`` swaps in another source
        of ``(preds, member_grads)``, e.g. ``tape_member_grads``.
        """
        preds, g = (grads or self.member_grads)(ctx, u)
        K = self.K
        mu = preds.sum(axis=0) / K
        dev = preds - mu
        sigma = np.sqrt((dev * dev).sum(axis=0) / K)
        grad = g.sum(axis=0) / K
        if beta != 0.0:
            safe = np.where(sigma > 0, sigma, 1.0)
            dsigma = np.einsum("kb,kbj->bj", dev, g) / (K * safe)[:, None]
            dsigma[sigma == 0] = 0.0
            grad = grad - beta * dsigma
        return mu - beta * sigma, grad, mu, sigma

    # -- raw-unit conveniences ---------------------------------------------
    def predict(self, states: StateBatch, actions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        ctx = self.prepare(states)
        return self.mean_std(ctx, self.scaler.normalize_action(actions))


def ensemble_fit(
    d: Dataset, K: int, cfg: TrainConfig, seeds: Optional[Sequence[int]] = None
) -> RewardEnsemble:
    """Train ``K`` members, member ``k`` on ``bootstrap_sample(d, seeds[k])``.

    Member ``k`` uses ``seeds[k]`` both for its bootstrap draw and for its
    initialization.  All members share the input scaler fitted on ``d``.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    seeds = list(seeds) if seeds is not None else [cfg.seed * 1000 + k for k in range(K)]
    if len(seeds) != K:
        raise ValueError("need one seed per member")
    scaler = fit_standardizer(d)
    members, histories, times = [], [], []
    for seed in seeds:
        t0 = _time.perf_counter()
        boot = bootstrap_sample(d, seed)
        member_cfg = TrainConfig(**{**asdict(cfg), "seed": seed})
        net, hist = train(boot, member_cfg, scaler)
        members.append(net)
        histories.append(hist)
        times.append(_time.perf_counter() - t0)
        logger.info("member seed %d: loss %.4f -> %.4f (%.1fs)", seed, hist[0], hist[-1], times[-1])
    meta = {"train_config": asdict(cfg), "loss_history": histories, "n_rows": len(d)}
    return RewardEnsemble(members, seeds, meta)


def ensemble_predict(e: RewardEnsemble, states: StateBatch, actions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and population standard deviation of member predictions."""
    return e.predict(states, actions)


def ensemble_grad_action(e: RewardEnsemble, states: StateBatch, actions: np.ndarray, beta: float) -> np.ndarray:
    """Gradient of ``mu - beta * sigma`` with respect to the [0, 1] action."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    ctx = e.prepare(states)
    return e.objective_grad(ctx, e.scaler.normalize_action(actions), beta)[1]


# ----------------------------------------------------------------------
# checkpoints
def _write_checkpoint(path: Union[str, Path], manifest: dict, arrays: List[np.ndarray]) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    (path / "params.bin").write_bytes(blob)
    manifest = dict(manifest, blob="params.bin", blob_sha256=hashlib.sha256(blob).hexdigest(), blob_bytes=len(blob))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _read_checkpoint(path: Union[str, Path], kind: str) -> Tuple[dict, np.ndarray]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint schema {manifest.get('schema_version')}")
    if manifest.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind} checkpoint, found {manifest.get('kind')}")
    blob = (path / manifest["blob"]).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise ValueError(f"{path}: parameter blob does not match its hash")
    return manifest, np.frombuffer(blob, dtype="<f8").astype(np.float64)


def save_ensemble(e: RewardEnsemble, path: Union[str, Path]) -> None:
    shapes = param_shapes(e.n_counters)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "kind": "reward_ensemble",
        "architecture": {"window": e.window, "n_counters": e.n_counters, "hidden": HIDDEN, "n_cps": N_CPS},
        "member_seeds": e.member_seeds,
        "param_order": [[n, list(s)] for n, s in shapes.items()],
        "scaler": e.scaler.to_dict(),
        "metadata": e.metadata,
    }
    arrays = [m.params[n] for m in e.members for n in shapes]
    _write_checkpoint(path, manifest, arrays)


def load_ensemble(path: Union[str, Path]) -> RewardEnsemble:
    manifest, flat = _read_checkpoint(path, "reward_ensemble")
    arch = manifest["architecture"]
    scaler = Standardizer.from_dict(manifest["scaler"])
    order = [(n, tuple(s)) for n, s in manifest["param_order"]]
    members, pos = [], 0
    for _ in manifest["member_seeds"]:
        params = {}
        for name, shape in order:
            size = int(np.prod(shape))
            params[name] = flat[pos:pos + size].reshape(shape)
            pos += size
        members.append(RewardNet(params, scaler, arch["window"], arch["n_counters"]))
    if pos != flat.size:
        raise ValueError("checkpoint blob size does not match the declared parameters")
    return RewardEnsemble(members, manifest["member_seeds"], manifest.get("metadata"))
