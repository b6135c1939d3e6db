from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from ..model import EmbeddingPoint
from ..numerics import PrecisionMode


class Regime(enum.Enum):
    CONSTANT = "constant"
    CHAOTIC = "chaotic"
    SIGNAL = "signal_dominated"
    UNCLASSIFIED = "unclassified"


REGIME_RANK = {Regime.CONSTANT: 0, Regime.CHAOTIC: 1, Regime.SIGNAL: 2}


@dataclass(frozen=True)
class RegimeThresholds:
    """Decision rule for labelling a sweep point.

    constant: output bitwise unchanged; chaotic: ``d_eff > chaos * sigma_1``;
    signal-dominated: ``sigma_d * signal_low <= d_eff <= signal_high * sigma_1``.
    """

    chaos: float = 10.0
    signal_low: float = 0.1
    signal_high: float = 10.0

    def classify(self, d_eff: float, bitwise_constant: bool, sigma_max: float, sigma_min: float) -> Regime:
        if bitwise_constant:
            return Regime.CONSTANT
        if not np.isfinite(d_eff):
            return Regime.UNCLASSIFIED
        if d_eff > self.chaos * sigma_max:
            return Regime.CHAOTIC
        if sigma_min * self.signal_low <= d_eff <= self.signal_high * sigma_max:
            return Regime.SIGNAL
        return Regime.UNCLASSIFIED

    def to_dict(self) -> dict:
        return {"chaos": self.chaos, "signal_low": self.signal_low, "signal_high": self.signal_high}


def local_map(model, base):
    """Bind ``model`` (toy model, oracle, or an existing local map) to a base point."""
    if hasattr(model, "evaluate") and hasattr(model, "x0"):
        return model
    return model.local_map(base)


def perturb(lm, s, directions) -> np.ndarray:
    """Lattice points ``x0 + s * delta``; the step is rounded, then the sum.

    ``s`` has shape ``(B,)`` and ``directions`` ``(B, n)`` or ``(n,)``.
    """
    mode: PrecisionMode = lm.precision
    s = np.asarray(s, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    step = mode.round(s[:, None] * d)
    return mode.add(lm.x0, step)


def bitwise_equal_rows(a, b) -> np.ndarray:
    """Row-wise bit-pattern equality (so -0.0 != 0.0 and NaN never matches)."""
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(np.broadcast_to(b, a.shape))
    ints = np.uint64 if a.dtype == np.float64 else np.uint32
    eq = a.view(ints) == b.view(ints)
    eq &= ~np.isnan(a)
    return eq.reshape(a.shape[0], -1).all(axis=1)


def unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def check_unit(v, tol: float = 1e-10) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if abs(np.linalg.norm(v) - 1.0) > tol:
        raise ValueError(f"direction is not unit-norm (|v| = {np.linalg.norm(v):.15g})")
    return v


def random_directions(n: int, dim: int, seed: int) -> list[tuple[str, np.ndarray]]:
    rng = np.random.default_rng([0xD1, seed])
    out = []
    for i in range(n):
        out.append((f"rand{i}", unit(rng.standard_normal(dim))))
    return out


def log_grid(lo: float = 1e-14, hi: float = 1e-1, n: int = 120) -> np.ndarray:
    return np.logspace(np.log10(lo), np.log10(hi), n)


@dataclass
class SweepConfig:
    eps_grid: np.ndarray
    directions: list[tuple[str, np.ndarray]]
    precision: PrecisionMode
    base_point: EmbeddingPoint | np.ndarray
    thresholds: RegimeThresholds = field(default_factory=RegimeThresholds)

    def __post_init__(self):
        self.eps_grid = np.asarray(self.eps_grid, dtype=np.float64)
        if self.eps_grid.ndim != 1 or self.eps_grid.size == 0:
            raise ValueError("eps_grid must be a non-empty vector")
        if np.any(self.eps_grid <= 0) or np.any(np.diff(self.eps_grid) <= 0):
            raise ValueError("eps_grid must be positive and strictly increasing")
        self.directions = [(str(label), check_unit(v)) for label, v in self.directions]
        self.precision = PrecisionMode.parse(self.precision)
