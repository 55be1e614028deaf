"""Projected gradient ascent over CP actions.

The objective is ``mu(s, u) - beta * sigma(s, u)`` from a reward ensemble,
maximized over normalized actions ``u`` in the unit box.  Each step is::

    u <- clip(u + alpha * grad_u objective, 0, 1)

and a start stops once the sup-norm of the proposed move drops below ``tol``
(the sub-tolerance move is discarded) or after ``max_steps`` steps.

Any object with ``objective_grad(ctx, u, beta) -> (obj, grad, mu, sigma)``
can be optimized; :class:`~cellbandit.rewardnet.RewardEnsemble` is the usual
one, with ``ctx`` from ``RewardEnsemble.prepare``.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .domain import N_CPS, StateBatch


class GAError(RuntimeError):
    pass


@dataclass
class GAConfig:
    alpha: float = 0.05
    max_steps: int = 500
    tol: float = 1e-4
    n_starts: int = 10
    init_source: str = "uniform"  # or "policy"
    beta: float = 0.0
    # optional subset of CP indices that may move; the rest stay at their start
    active: Optional[List[int]] = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("GAConfig.alpha must be > 0")
        if self.tol < 0:
            raise ValueError("GAConfig.tol must be >= 0")
        if self.n_starts < 1:
            raise ValueError("GAConfig.n_starts must be >= 1")
        if self.beta < 0:
            raise ValueError("GAConfig.beta must be >= 0")
        if self.init_source not in ("uniform", "policy"):
            raise ValueError(f"unknown init_source {self.init_source!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "GAConfig":
        return cls(**d)


@dataclass
class GAResult:
    best_action: np.ndarray  # raw CP values
    best_u: np.ndarray  # normalized
    objective_value: float
    mu: float
    sigma: float
    steps_per_start: List[int]
    objectives: List[float]  # final objective of each start
    mus: List[float]
    sigmas: List[float]
    start_times: List[float]  # seconds, serial, including initialization
    actions_u: np.ndarray  # (n_starts, 14) final normalized action per start
    actions: np.ndarray  # (n_starts, 14) raw
    wall_time: float
    trajectory: Optional[List[np.ndarray]] = None

    def prefix(self, n: int) -> "GAResult":
        """The result a run with only the first ``n`` starts returns."""
        if not 1 <= n <= len(self.objectives):
            raise ValueError(f"prefix length {n} out of range")
        b = int(np.argmax(self.objectives[:n]))
        return GAResult(
            best_action=self.actions[b],
            best_u=self.actions_u[b],
            objective_value=self.objectives[b],
            mu=self.mus[b],
            sigma=self.sigmas[b],
            steps_per_start=self.steps_per_start[:n],
            objectives=self.objectives[:n],
            mus=self.mus[:n],
            sigmas=self.sigmas[:n],
            start_times=self.start_times[:n],
            actions_u=self.actions_u[:n],
            actions=self.actions[:n],
            wall_time=float(sum(self.start_times[:n])),
            trajectory=self.trajectory,
        )


def _mask(active: Optional[Sequence[int]]) -> Optional[np.ndarray]:
    if active is None:
        return None
    m = np.zeros(N_CPS)
    m[list(active)] = 1.0
    return m


def ga_step(model, ctx, u: np.ndarray, alpha: float, beta: float, active=None):
    """One projected ascent step; returns ``(u_next, objective_at_u)``."""
    obj, grad, _, _ = model.objective_grad(ctx, u, beta)
    if not np.all(np.isfinite(grad)):
        raise GAError("non-finite action gradient")
    if active is not None:
        grad = grad * (active if isinstance(active, np.ndarray) else _mask(active))
    return np.clip(u + alpha * grad, 0.0, 1.0), obj


def optimize(model, ctx, u0: np.ndarray, cfg: GAConfig, keep_trajectory: bool = False):
    """Ascend from ``u0`` (shape ``(1, 14)``).

    Returns ``(u, objective, mu, sigma, steps, trajectory)`` where ``steps``
    counts the gradient evaluations performed, including the final converged
    check.
    """
    u = np.atleast_2d(np.asarray(u0, dtype=np.float64))
    if np.any(u < 0) or np.any(u > 1):
        raise ValueError("initial action must lie in the normalized box")
    active = _mask(cfg.active)
    alpha, beta, tol = cfg.alpha, cfg.beta, cfg.tol
    traj = [u[0].copy()] if keep_trajectory else None
    steps = 0
    last = None  # evaluation at the current u, if any
    while steps < cfg.max_steps:
        obj, grad, mu, sigma = model.objective_grad(ctx, u, beta)
        steps += 1
        if not np.isfinite(grad).all():
            raise GAError("non-finite action gradient")
        if active is not None:
            grad = grad * active
        u_next = np.clip(u + alpha * grad, 0.0, 1.0)
        if np.abs(u_next - u).max() < tol:
            last = (obj, mu, sigma)
            break
        u = u_next
        if keep_trajectory:
            traj.append(u[0].copy())
    if last is None:
        obj, _, mu, sigma = model.objective_grad(ctx, u, beta)
        last = (obj, mu, sigma)
    obj, mu, sigma = last
    return u, float(obj[0]), float(mu[0]), float(sigma[0]), steps, traj


def _initial_action(cfg: GAConfig, states: StateBatch, policy, rng: np.random.Generator, base_u=None) -> np.ndarray:
    if cfg.init_source == "policy":
        u = policy.sample_normalized(states, rng)
    else:
        u = rng.random((1, N_CPS))
    if cfg.active is not None and base_u is not None:
        keep = _mask(cfg.active) == 0
        u = np.where(keep, base_u, u)
    return u


def multi_start(
    model,
    state: StateBatch,
    cfg: GAConfig,
    policy=None,
    seed: int = 0,
    ctx=None,
    box=None,
    base_u: Optional[np.ndarray] = None,
    keep_trajectory: bool = False,
) -> GAResult:
    """Run ``cfg.n_starts`` ascents for one state and keep the best.

    Start ``j`` draws its initial action from the stream ``(seed, j)``, so the
    first ``n`` starts are identical for any ``n_starts >= n``.  Starts run
    serially; ``wall_time`` is their summed time including policy sampling.
    With ``cfg.active`` set, inactive CPs are held at ``base_u``.
    """
    if cfg.init_source == "policy" and policy is None:
        raise ValueError("init_source='policy' requires a policy")
    if len(state) != 1:
        raise ValueError("multi_start optimizes one state at a time")
    box = box if box is not None else getattr(getattr(model, "scaler", None), "box", None)
    if ctx is None:
        ctx = model.prepare(state)
    objs, mus, sigmas, steps, times, finals, traj = [], [], [], [], [], [], None
    for j in range(cfg.n_starts):
        t0 = time.perf_counter()
        u0 = _initial_action(cfg, state, policy, np.random.default_rng([seed, j]), base_u)
        u, obj, mu, sigma, n, tr = optimize(model, ctx, u0, cfg, keep_trajectory and j == 0)
        times.append(time.perf_counter() - t0)
        objs.append(obj)
        mus.append(mu)
        sigmas.append(sigma)
        steps.append(n)
        finals.append(u[0])
        if tr is not None:
            traj = tr
    finals = np.array(finals)
    full = GAResult(
        best_action=None, best_u=None, objective_value=0.0, mu=0.0, sigma=0.0,
        steps_per_start=steps, objectives=objs, mus=mus, sigmas=sigmas, start_times=times,
        actions_u=finals, actions=box.denormalize(finals) if box is not None else finals,
        wall_time=0.0, trajectory=traj,
    )
    return full.prefix(cfg.n_starts)


def optimize_states(model, states: StateBatch, cfg: GAConfig, policy=None, seed: int = 0) -> List[GAResult]:
    """``multi_start`` for each state; state ``i`` uses seed stream ``(seed, i)``."""
    ctx_all = model.prepare(states)
    results = []
    for i in range(len(states)):
        ctx = ctx_all.row(i)
        state_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        results.append(multi_start(model, states.take([i]), cfg, policy, state_seed, ctx=ctx))
    return results


# ----------------------------------------------------------------------
# CSV
RESULT_COLUMNS = ["seed", "init_source", "n_starts", "beta", "objective", "mu", "sigma", "steps", "wall_time_ms"] + [
    f"cp_{i}" for i in range(1, N_CPS + 1)
]
_INT_COLUMNS = ("seed", "n_starts", "steps", "state")


def result_row(res: GAResult, seed: int, init_source: str, beta: float) -> Dict[str, object]:
    """One CSV record; ``steps`` is the total over all starts of the run."""
    row = {
        "seed": int(seed),
        "init_source": init_source,
        "n_starts": len(res.objectives),
        "beta": float(beta),
        "objective": res.objective_value,
        "mu": res.mu,
        "sigma": res.sigma,
        "steps": int(sum(res.steps_per_start)),
        "wall_time_ms": 1000.0 * res.wall_time,
    }
    row.update({f"cp_{i + 1}": float(v) for i, v in enumerate(res.best_action)})
    return row


def _fmt(v) -> str:
    return format(v, ".17g") if isinstance(v, float) else str(v)


def write_results(path: Union[str, Path], rows: Sequence[Dict[str, object]], leading: Sequence[str] = ()) -> None:
    """Write GA records; ``leading`` names extra key columns placed first."""
    cols = list(leading) + RESULT_COLUMNS
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in cols])


def read_results(path: Union[str, Path]) -> List[Dict[str, object]]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for r in csv.DictReader(fh):
            rec = {}
            for k, v in r.items():
                if k == "init_source":
                    rec[k] = v
                elif k in _INT_COLUMNS:
                    rec[k] = int(v)
                else:
                    rec[k] = float(v)
            out.append(rec)
    return out
