"""Shared domain types: cells, network states, CP actions and the CP box."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

N_CPS = 14
N_EP = 6
N_TIME = 4

CP_NAMES = tuple(f"cp{i:02d}" for i in range(1, N_CPS + 1))

# Generic per-dimension CP ranges.  Which CPs the operator tunes is not
# public, so the box is synthetic but deliberately non-uniform so that the
# min-max normalization used by the optimizers is exercised.
CP_LOW = np.array([0.0, -6.0, 0.0, 1.0, -3.0, 0.0, 10.0, 0.0, -20.0, 0.0, 2.0, -1.0, 0.0, 5.0])
CP_HIGH = np.array([15.0, 6.0, 1.0, 8.0, 3.0, 100.0, 40.0, 5.0, 0.0, 12.0, 10.0, 1.0, 30.0, 25.0])

EP_NAMES = ("mech_tilt", "elec_tilt", "azimuth", "height", "tx_power", "beamwidth")
EP_LOW = np.array([0.0, 0.0, 0.0, 15.0, 30.0, 30.0])
EP_HIGH = np.array([10.0, 12.0, 360.0, 60.0, 46.0, 90.0])


@dataclass(frozen=True)
class Box:
    """Axis-aligned action box ``[low, high]``."""

    low: np.ndarray
    high: np.ndarray

    @property
    def width(self) -> np.ndarray:
        return self.high - self.low

    @property
    def log_volume(self) -> float:
        return float(np.sum(np.log(self.width)))

    def normalize(self, a: np.ndarray) -> np.ndarray:
        return (np.asarray(a, dtype=np.float64) - self.low) / self.width

    def denormalize(self, u: np.ndarray) -> np.ndarray:
        return self.low + np.asarray(u, dtype=np.float64) * self.width

    def contains(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        return np.all((a >= self.low) & (a <= self.high), axis=-1)


CP_BOX = Box(CP_LOW, CP_HIGH)


@dataclass(frozen=True)
class CellSpec:
    cell_id: int
    ep: np.ndarray
    location: Optional[Tuple[float, float]] = None


@dataclass(frozen=True)
class NetworkState:
    """Context of one cell at one hour."""

    cell: CellSpec
    time_features: np.ndarray  # hour sin/cos, day-of-week sin/cos
    counters: np.ndarray  # (T, C), oldest hour first


@dataclass(frozen=True)
class Action:
    cp: np.ndarray

    def __post_init__(self):
        cp = np.asarray(self.cp, dtype=np.float64)
        if cp.shape != (N_CPS,):
            raise ValueError(f"an action has exactly {N_CPS} CPs, got shape {cp.shape}")
        object.__setattr__(self, "cp", cp)


@dataclass(frozen=True)
class StateBatch:
    """Column-stacked network states, the form every batched routine takes."""

    time: np.ndarray  # (N, 4)
    ep: np.ndarray  # (N, 6)
    counters: np.ndarray  # (N, T, C)

    def __len__(self) -> int:
        return self.time.shape[0]

    def take(self, idx) -> "StateBatch":
        idx = np.atleast_1d(idx)
        return StateBatch(self.time[idx], self.ep[idx], self.counters[idx])

    @classmethod
    def from_state(cls, s: NetworkState) -> "StateBatch":
        return cls(
            np.asarray(s.time_features, dtype=np.float64)[None],
            np.asarray(s.cell.ep, dtype=np.float64)[None],
            np.asarray(s.counters, dtype=np.float64)[None],
        )


def time_features(hour, day) -> np.ndarray:
    """Hour-of-day and day-of-week encodings, shape ``(..., 4)``."""
    hour, day = np.broadcast_arrays(np.asarray(hour, dtype=np.float64), np.asarray(day, dtype=np.float64))
    dow = day % 7
    h = 2.0 * np.pi * hour / 24.0
    d = 2.0 * np.pi * dow / 7.0
    return np.stack([np.sin(h), np.cos(h), np.sin(d), np.cos(d)], axis=-1)
