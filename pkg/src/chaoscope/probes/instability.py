"""Finite-difference instability statistics along a single direction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..model import logit_margin
from ..numerics import PrecisionMode, ulp_spacing
from .common import bitwise_equal_rows, check_unit, local_map, perturb


@dataclass(frozen=True)
class InstabilitySummary:
    mean_inst: float
    median_inst: float
    max_drift: float
    mean_margin: float
    min_margin: float


@dataclass(frozen=True)
class InstabilitySweep:
    summary: InstabilitySummary
    eps: np.ndarray
    inst: np.ndarray      # length T-1, I_i for i = 2..T
    drift: np.ndarray     # ||m_i - m_1|| for every point
    margin: np.ndarray    # top-2 logit margin at every point


def instability_statistic(ms, eps) -> np.ndarray:
    """``I_i = ||m_i - m_{i-1}|| / (eps_i - eps_{i-1})`` in float64."""
    ms = np.asarray(ms, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    return np.linalg.norm(np.diff(ms, axis=0), axis=1) / np.diff(eps)


def summarize(ms, eps, margins) -> InstabilitySweep:
    ms = np.asarray(ms, dtype=np.float64)
    inst = instability_statistic(ms, eps)
    drift = np.linalg.norm(ms - ms[0], axis=1)
    margins = np.asarray(margins, dtype=np.float64)
    summary = InstabilitySummary(
        mean_inst=float(inst.mean()),
        median_inst=float(np.median(inst)),
        max_drift=float(drift.max()),
        mean_margin=float(margins.mean()),
        min_margin=float(margins.min()),
    )
    return InstabilitySweep(summary, np.asarray(eps, dtype=np.float64), inst, drift, margins)


def instability_sweep(model, base_point, direction, eps_sequence) -> InstabilitySweep:
    eps = np.asarray(eps_sequence, dtype=np.float64)
    if eps.ndim != 1 or eps.size < 2:
        raise ValueError("eps_sequence needs at least two points")
    if np.any(np.diff(eps) <= 0):
        raise ValueError("eps_sequence must be strictly increasing")
    lm = local_map(model, base_point)
    v = check_unit(direction)
    m, logits = lm.evaluate(perturb(lm, eps, v))
    if not (np.all(np.isfinite(m)) and np.all(np.isfinite(logits))):
        raise ArithmeticError("non-finite forward pass inside the instability sweep")
    return summarize(m, eps, logit_margin(logits))


@dataclass(frozen=True)
class Staircase:
    s: np.ndarray            # n_steps + 1 sample positions
    step_norm: np.ndarray    # ||m_i - m_{i-1}||, length n_steps
    cumulative: np.ndarray   # ||m_i - m_0||, length n_steps + 1
    stall: np.ndarray        # bitwise-equal consecutive outputs, length n_steps

    @property
    def stall_count(self) -> int:
        return int(self.stall.sum())

    @property
    def jump_count(self) -> int:
        return int((~self.stall).sum())


def micro_continuity(model, base_point, direction, start_s: float, n_steps: int, delta: float,
                     check_sub_ulp: bool = True) -> Staircase:
    """Sweep ``s = start_s + i*delta`` with a step far below the float32 spacing."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    lm = local_map(model, base_point)
    v = check_unit(direction)
    if check_sub_ulp:
        typical = float(np.sqrt(np.mean(np.square(np.asarray(lm.x0, dtype=np.float64)))))
        spacing = float(ulp_spacing(typical, PrecisionMode.FP32))
        if delta >= spacing:
            raise ValueError(f"delta={delta:g} is not below the float32 spacing {spacing:g} at |x|~{typical:g}")
    s = start_s + delta * np.arange(n_steps + 1)
    m = lm.lst(perturb(lm, s, v))
    stall = bitwise_equal_rows(m[1:], m[:-1])
    m64 = m.astype(np.float64)
    return Staircase(
        s=s,
        step_norm=np.linalg.norm(np.diff(m64, axis=0), axis=1),
        cumulative=np.linalg.norm(m64 - m64[0], axis=1),
        stall=stall,
    )
