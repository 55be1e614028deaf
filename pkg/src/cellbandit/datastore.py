"""Logged-interaction datasets and the operations defined on them.

A :class:`Dataset` is stored column-wise (one numpy array per field) rather
than as a list of row objects; :meth:`Dataset.rows` yields
:class:`LoggedInteraction` views when row semantics are wanted.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .domain import CP_BOX, N_CPS, N_EP, N_TIME, Action, Box, CellSpec, NetworkState, StateBatch

logger = logging.getLogger(__name__)

_ARRAY_FIELDS = (
    "cell_id", "day", "hour", "time", "ep", "counters", "action", "reward", "propensity", "is_hypothetical",
)
_AUGMENT_STREAM = 0xA55


@dataclass(frozen=True)
class LoggedInteraction:
    state: NetworkState
    action: Action
    reward: float
    propensity: float
    is_hypothetical: bool = False


@dataclass(eq=False)
class Dataset:
    cell_id: np.ndarray
    day: np.ndarray
    hour: np.ndarray
    time: np.ndarray  # (N, 4)
    ep: np.ndarray  # (N, 6)
    counters: np.ndarray  # (N, T, C)
    action: np.ndarray  # (N, 14) raw CP values
    reward: np.ndarray
    propensity: np.ndarray
    is_hypothetical: np.ndarray
    box: Box = CP_BOX
    scaler: Optional["Standardizer"] = None

    def __post_init__(self):
        n = len(self.reward)
        for name in _ARRAY_FIELDS:
            arr = getattr(self, name)
            if len(arr) != n:
                raise ValueError(f"Dataset.{name} has {len(arr)} rows, expected {n}")
        if self.time.shape[1:] != (N_TIME,) or self.ep.shape[1:] != (N_EP,) or self.action.shape[1:] != (N_CPS,):
            raise ValueError("Dataset feature widths do not match the schema")
        if self.counters.ndim != 3:
            raise ValueError("Dataset.counters must have shape (N, T, C)")
        for name in ("time", "ep", "counters", "action", "reward", "propensity"):
            if np.isnan(getattr(self, name)).any():
                raise ValueError(f"Dataset.{name} contains NaN")

    def __len__(self) -> int:
        return len(self.reward)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in _ARRAY_FIELDS) and bool(
            np.array_equal(self.box.low, other.box.low) and np.array_equal(self.box.high, other.box.high)
        )

    @property
    def window(self) -> int:
        return self.counters.shape[1]

    @property
    def n_counters(self) -> int:
        return self.counters.shape[2]

    @property
    def states(self) -> StateBatch:
        return StateBatch(self.time, self.ep, self.counters)

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        if idx.size == 0:
            idx = idx.astype(np.intp)
        kw = {f: getattr(self, f)[idx] for f in _ARRAY_FIELDS}
        return Dataset(**kw, box=self.box, scaler=self.scaler)

    def factual(self) -> "Dataset":
        return self.take(np.flatnonzero(~self.is_hypothetical))

    def with_rows(self, **updates) -> "Dataset":
        return replace(self, **updates)

    def row(self, i: int) -> LoggedInteraction:
        state = NetworkState(CellSpec(int(self.cell_id[i]), self.ep[i]), self.time[i], self.counters[i])
        return LoggedInteraction(
            state, Action(self.action[i]), float(self.reward[i]), float(self.propensity[i]), bool(self.is_hypothetical[i])
        )

    def rows(self) -> Iterator[LoggedInteraction]:
        for i in range(len(self)):
            yield self.row(i)

    @classmethod
    def from_rows(cls, rows: Sequence[LoggedInteraction], box: Box = CP_BOX, day=None, hour=None) -> "Dataset":
        n = len(rows)
        return cls(
            cell_id=np.array([r.state.cell.cell_id for r in rows], dtype=np.int64),
            day=np.zeros(n, dtype=np.int64) if day is None else np.asarray(day),
            hour=np.zeros(n, dtype=np.int64) if hour is None else np.asarray(hour),
            time=np.array([r.state.time_features for r in rows], dtype=np.float64).reshape(n, N_TIME),
            ep=np.array([r.state.cell.ep for r in rows], dtype=np.float64).reshape(n, N_EP),
            counters=np.array([r.state.counters for r in rows], dtype=np.float64),
            action=np.array([r.action.cp for r in rows], dtype=np.float64).reshape(n, N_CPS),
            reward=np.array([r.reward for r in rows], dtype=np.float64),
            propensity=np.array([r.propensity for r in rows], dtype=np.float64),
            is_hypothetical=np.array([r.is_hypothetical for r in rows], dtype=bool),
            box=box,
        )


def concat(parts: Sequence[Dataset]) -> Dataset:
    kw = {f: np.concatenate([getattr(p, f) for p in parts]) for f in _ARRAY_FIELDS}
    return Dataset(**kw, box=parts[0].box, scaler=parts[0].scaler)


# ----------------------------------------------------------------------
# splitting and resampling
def split(d: Dataset, test_rows: int, seed: int) -> Tuple[Dataset, Dataset]:
    """Uniform split without replacement; row order is kept within each part."""
    if not 0 <= test_rows < len(d):
        raise ValueError(f"test_rows={test_rows} must be in [0, {len(d)})")
    perm = np.random.default_rng([seed, 0x5B]).permutation(len(d))
    test_idx = np.sort(perm[:test_rows])
    train_idx = np.sort(perm[test_rows:])
    return d.take(train_idx), d.take(test_idx)


def bootstrap_sample(d: Dataset, seed: int) -> Dataset:
    if len(d) == 0:
        raise ValueError("cannot bootstrap an empty dataset")
    idx = np.random.default_rng([seed, 0xB0]).integers(0, len(d), size=len(d))
    return d.take(idx)


# ----------------------------------------------------------------------
# standardization
@dataclass
class Standardizer:
    """Per-feature affine scaling of state features plus min-max CP scaling.

    Zero-variance features get ``mean = 0`` and ``std = 1`` so they pass
    through unchanged.
    """

    time_mean: np.ndarray
    time_std: np.ndarray
    ep_mean: np.ndarray
    ep_std: np.ndarray
    ctr_mean: np.ndarray  # (T, C)
    ctr_std: np.ndarray
    reward_mean: float = 0.0
    reward_std: float = 1.0
    box: Box = CP_BOX

    def transform_states(self, s: StateBatch) -> StateBatch:
        return StateBatch(
            (s.time - self.time_mean) / self.time_std,
            (s.ep - self.ep_mean) / self.ep_std,
            (s.counters - self.ctr_mean) / self.ctr_std,
        )

    def inverse_states(self, s: StateBatch) -> StateBatch:
        return StateBatch(
            s.time * self.time_std + self.time_mean,
            s.ep * self.ep_std + self.ep_mean,
            s.counters * self.ctr_std + self.ctr_mean,
        )

    def normalize_action(self, a: np.ndarray) -> np.ndarray:
        return self.box.normalize(a)

    def denormalize_action(self, u: np.ndarray) -> np.ndarray:
        return self.box.denormalize(u)

    def transform_reward(self, r: np.ndarray) -> np.ndarray:
        return (np.asarray(r) - self.reward_mean) / self.reward_std

    def inverse_reward(self, r: np.ndarray) -> np.ndarray:
        return np.asarray(r) * self.reward_std + self.reward_mean

    def to_dict(self) -> dict:
        return {
            "time_mean": self.time_mean.tolist(), "time_std": self.time_std.tolist(),
            "ep_mean": self.ep_mean.tolist(), "ep_std": self.ep_std.tolist(),
            "ctr_mean": self.ctr_mean.tolist(), "ctr_std": self.ctr_std.tolist(),
            "reward_mean": self.reward_mean, "reward_std": self.reward_std,
            "box_low": self.box.low.tolist(), "box_high": self.box.high.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        arr = lambda k: np.asarray(d[k], dtype=np.float64)  # noqa: E731
        return cls(
            arr("time_mean"), arr("time_std"), arr("ep_mean"), arr("ep_std"),
            arr("ctr_mean"), arr("ctr_std"), float(d["reward_mean"]), float(d["reward_std"]),
            Box(arr("box_low"), arr("box_high")),
        )


def _moments(x: np.ndarray, name: str) -> Tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    const = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    if np.any(const):
        warnings.warn(f"{int(const.sum())} zero-variance {name} feature(s); left unscaled", RuntimeWarning, stacklevel=3)
        mean = np.where(const, 0.0, mean)
        std = np.where(const, 1.0, std)
    return mean, std


def fit_standardizer(d: Dataset) -> Standardizer:
    if len(d) == 0:
        raise ValueError("cannot fit a standardizer on an empty dataset")
    tm, ts = _moments(d.time, "time")
    em, es = _moments(d.ep, "EP")
    cm, cs = _moments(d.counters, "counter")
    rm, rs = _moments(d.reward[:, None], "reward")
    return Standardizer(tm, ts, em, es, cm, cs, float(rm[0]), float(rs[0]), d.box)


_UNIT_BOX = Box(np.zeros(N_CPS), np.ones(N_CPS))


def apply_standardizer(d: Dataset, s: Standardizer) -> Dataset:
    """Standardized state features and [0, 1] actions; rewards stay raw."""
    st = s.transform_states(d.states)
    return replace(d, time=st.time, ep=st.ep, counters=st.counters, action=s.normalize_action(d.action),
                   box=_UNIT_BOX, scaler=s)


def invert_standardizer(d: Dataset) -> Dataset:
    s = d.scaler
    if s is None:
        raise ValueError("dataset carries no standardizer")
    st = s.inverse_states(d.states)
    return replace(d, time=st.time, ep=st.ep, counters=st.counters, action=s.denormalize_action(d.action),
                   box=s.box, scaler=None)


# ----------------------------------------------------------------------
# nearest neighbours
def matching_features(states: StateBatch, actions: np.ndarray, s: Standardizer) -> np.ndarray:
    """Standardized state features (counter window flattened) + [0, 1] actions."""
    st = s.transform_states(states)
    n = len(st)
    return np.concatenate(
        [st.time, st.ep, st.counters.reshape(n, -1), s.normalize_action(actions)], axis=1
    )


def knn_indices(queries: np.ndarray, reference: np.ndarray, k: int, chunk: int = 256) -> np.ndarray:
    """Exact k nearest rows of ``reference`` for each query, by Euclidean distance.

    Ties are broken by lower row index; each result row is ordered by
    (distance, index).  Candidates are screened with the expanded-norm
    identity and then re-ranked with directly computed distances.
    """
    queries = np.atleast_2d(queries)
    n = reference.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    ref_sq = np.einsum("ij,ij->i", reference, reference)
    out = np.empty((queries.shape[0], k), dtype=np.int64)
    for lo in range(0, queries.shape[0], chunk):
        q = queries[lo:lo + chunk]
        approx = ref_sq[None, :] - 2.0 * (q @ reference.T) + np.einsum("ij,ij->i", q, q)[:, None]
        if k < n:
            kth = np.partition(approx, k - 1, axis=1)[:, k - 1]
        else:
            kth = approx.max(axis=1)
        slack = 1e-9 * (np.abs(kth) + np.abs(approx).max(axis=1)) + 1e-12
        for r in range(q.shape[0]):
            cand = np.flatnonzero(approx[r] <= kth[r] + slack[r])
            diff = reference[cand] - q[r]
            dist = np.sum(diff * diff, axis=1)
            order = np.lexsort((cand, dist))[:k]
            out[lo + r] = cand[order]
    return out


def knn(query_features: np.ndarray, d: Dataset, k: int) -> np.ndarray:
    """Indices of the ``k`` rows of ``d`` closest to ``query_features``.

    ``query_features`` must already be in matching space (see
    :func:`matching_features`); ``d`` is scaled with its own standardizer,
    fitted on the fly when absent.
    """
    if k > len(d):
        raise ValueError(f"k={k} exceeds dataset size {len(d)}")
    s = d.scaler or fit_standardizer(d)
    ref = matching_features(d.states, d.action, s)
    return knn_indices(np.atleast_2d(query_features), ref, k)[0]


def augment_counterfactual(
    d: Dataset, k: int = 10, seed: int = 0, return_neighbors: bool = False
) -> Union[Dataset, Tuple[Dataset, np.ndarray]]:
    """Append one hypothetical row per factual row.

    Each hypothetical keeps its source row's state, draws CPs uniformly from
    the box and takes as reward the mean factual reward of the ``k`` nearest
    factual rows to (state, hypothetical CPs).  Factual rows are returned
    first and untouched.
    """
    if np.any(d.is_hypothetical):
        raise ValueError("augment_counterfactual expects a factual-only dataset")
    if k > len(d):
        raise ValueError(f"k={k} exceeds dataset size {len(d)}")
    s = fit_standardizer(d)
    rng = np.random.default_rng([seed, _AUGMENT_STREAM])
    hyp_actions = d.box.denormalize(rng.random((len(d), N_CPS)))
    ref = matching_features(d.states, d.action, s)
    queries = matching_features(d.states, hyp_actions, s)
    nbrs = np.sort(knn_indices(queries, ref, k), axis=1)
    hyp_reward = d.reward[nbrs].mean(axis=1)
    hyp = replace(
        d,
        action=hyp_actions,
        reward=hyp_reward,
        propensity=np.full(len(d), np.exp(-d.box.log_volume)),
        is_hypothetical=np.ones(len(d), dtype=bool),
    )
    out = concat([d, hyp])
    return (out, nbrs) if return_neighbors else out


# ----------------------------------------------------------------------
# CSV persistence
def csv_header(window: int, n_counters: int) -> List[str]:
    cols = ["cell_id", "day", "hour", "time_sin", "time_cos", "dow_sin", "dow_cos"]
    cols += [f"ep_{i}" for i in range(1, N_EP + 1)]
    cols += [f"ctr_t-{lag}_{c}" for lag in range(window - 1, -1, -1) for c in range(1, n_counters + 1)]
    cols += [f"cp_{i}" for i in range(1, N_CPS + 1)]
    cols += ["reward", "propensity", "is_hypothetical"]
    return cols


def write_csv(d: Dataset, path: Union[str, Path]) -> None:
    """UTF-8 CSV with floats at 17 significant digits (exact round trip)."""
    n, T, C = d.counters.shape
    block = np.column_stack([
        d.cell_id, d.day, d.hour, d.time, d.ep, d.counters.reshape(n, T * C), d.action,
        d.reward, d.propensity, d.is_hypothetical.astype(np.int64),
    ])
    n_float = block.shape[1] - 4
    fmt = ["%d"] * 3 + ["%.17g"] * n_float + ["%d"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(csv_header(T, C)) + "\n")
        np.savetxt(fh, block, fmt=fmt, delimiter=",")


def read_csv(path: Union[str, Path], box: Box = CP_BOX) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        ctr_cols = [h for h in header if h.startswith("ctr_t-")]
        C = max(int(h.rsplit("_", 1)[1]) for h in ctr_cols)
        T = len(ctr_cols) // C
        if header != csv_header(T, C):
            raise ValueError(f"{path}: header does not match the dataset schema")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    n = data.shape[0]
    col = 3
    def take(width):  # noqa: E306
        nonlocal col
        out = data[:, col:col + width]
        col += width
        return out
    time = take(N_TIME)
    ep = take(N_EP)
    counters = take(T * C).reshape(n, T, C)
    action = take(N_CPS)
    return Dataset(
        cell_id=data[:, 0].astype(np.int64),
        day=data[:, 1].astype(np.int64),
        hour=data[:, 2].astype(np.int64),
        time=np.ascontiguousarray(time), ep=np.ascontiguousarray(ep), counters=np.ascontiguousarray(counters),
        action=np.ascontiguousarray(action),
        reward=data[:, col].copy(), propensity=data[:, col + 1].copy(),
        is_hypothetical=data[:, col + 2].astype(bool),
        box=box,
    )
