"""Effective directional numbers over epsilon, per layer, and with noise averaging."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..spectrum import SpectrumResult
from .common import (
    REGIME_RANK,
    Regime,
    SweepConfig,
    bitwise_equal_rows,
    check_unit,
    local_map,
    perturb,
)


@dataclass(frozen=True)
class SweepRecord:
    eps: float
    direction_label: str
    d_eff: float
    bitwise_constant: bool
    regime: Regime
    flagged: bool = False


def directional_sweep(model, spectrum: SpectrumResult, cfg: SweepConfig) -> list[SweepRecord]:
    """``D(eps, v) = ||M(x + eps v) - M(x)|| / eps`` for every (direction, eps).

    Forward passes run in the model precision; the difference and norm are
    taken in float64.  Records are ordered by direction, then eps.
    """
    lm = local_map(model, cfg.base_point)
    if lm.precision is not cfg.precision:
        raise ValueError(f"sweep precision {cfg.precision.value} != model precision {lm.precision.value}")
    eps = cfg.eps_grid
    n_dir = len(cfg.directions)
    dirs = np.repeat(np.stack([v for _, v in cfg.directions]), eps.size, axis=0)
    s = np.tile(eps, n_dir)
    m0 = lm.lst(lm.x0[None])
    m = lm.lst(perturb(lm, s, dirs))
    const = bitwise_equal_rows(m, m0)
    finite = np.all(np.isfinite(m), axis=1)
    d_eff = np.linalg.norm(m.astype(np.float64) - m0.astype(np.float64), axis=1) / s
    d_eff[const] = 0.0
    sig_max, sig_min = float(spectrum.sigma[0]), float(spectrum.sigma[-1])
    records = []
    for i in range(s.size):
        label = cfg.directions[i // eps.size][0]
        if not finite[i]:
            records.append(SweepRecord(float(s[i]), label, float("nan"), False, Regime.UNCLASSIFIED, True))
            continue
        regime = cfg.thresholds.classify(d_eff[i], bool(const[i]), sig_max, sig_min)
        records.append(SweepRecord(float(s[i]), label, float(d_eff[i]), bool(const[i]), regime))
    return records


def smoothed_regimes(regimes: list[Regime], min_run: int = 2) -> list[Regime]:
    """Labels of the runs that persist for at least ``min_run`` grid points."""
    runs: list[tuple[Regime, int]] = []
    for r in regimes:
        if runs and runs[-1][0] is r:
            runs[-1] = (r, runs[-1][1] + 1)
        else:
            runs.append((r, 1))
    kept = [r for r, n in runs if n >= min_run and r is not Regime.UNCLASSIFIED]
    out: list[Regime] = []
    for r in kept:
        if not out or out[-1] is not r:
            out.append(r)
    return out


def is_ordered_trichotomy(regimes: list[Regime], min_run: int = 2) -> bool:
    """True when the smoothed sequence reads constant* chaotic* signal*."""
    ranks = [REGIME_RANK[r] for r in smoothed_regimes(regimes, min_run)]
    return all(a <= b for a, b in zip(ranks, ranks[1:]))


@dataclass(frozen=True)
class GainTable:
    """``gains[l, j]``: per-tap gain of direction ``labels[j]`` at layer tap ``l``."""

    eps: float
    labels: list[str]
    gains: np.ndarray
    bitwise_constant: np.ndarray

    def rows(self):
        for layer in range(self.gains.shape[0]):
            for j, label in enumerate(self.labels):
                yield layer, label, float(self.gains[layer, j])


def layerwise_gain(model, spectrum: SpectrumResult | None, eps: float, directions, base_point=None) -> GainTable:
    """``||tap_l(x + eps v) - tap_l(x)|| / eps`` for every tap ``l`` and direction ``v``."""
    lm = local_map(model, base_point)
    labels = [str(label) for label, _ in directions]
    dirs = np.stack([check_unit(v) for _, v in directions])
    _, _, t0 = lm.evaluate(lm.x0[None], taps=True)
    _, _, t = lm.evaluate(perturb(lm, np.full(len(labels), eps), dirs), taps=True)
    diff = t.astype(np.float64) - t0.astype(np.float64)
    gains = np.linalg.norm(diff, axis=2) / eps
    const = bitwise_equal_rows(t[-1], t0[-1])
    if not np.all(np.isfinite(gains)):
        gains = np.where(np.isfinite(gains), gains, np.nan)
    return GainTable(float(eps), labels, gains, const)


def noise_averaged_kappa(model, x0, direction, eps: float, n_samples: int,
                         noise_mag: float = 1e-9, seed: int = 0) -> float:
    """Noise-averaged directional number.

    Averages ``M(x0 + (eps + t_j) v)`` and ``M(x0 + t_j v)`` over ``n_samples``
    seeded offsets ``t_j ~ U(-noise_mag, noise_mag)`` and divides the
    distance between the two means by ``eps``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    lm = local_map(model, x0)
    v = check_unit(direction)
    rng = np.random.default_rng([0x5A7, seed, n_samples])
    t = noise_mag * rng.uniform(-1.0, 1.0, n_samples) if noise_mag > 0 else np.zeros(n_samples)
    s = np.concatenate([eps + t, t])
    m = lm.lst(perturb(lm, s, v)).astype(np.float64)
    if not np.all(np.isfinite(m)):
        return float("nan")
    shifted = m[:n_samples].mean(axis=0)
    anchor = m[n_samples:].mean(axis=0)
    return float(np.linalg.norm(shifted - anchor) / eps)
