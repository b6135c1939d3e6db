"""Two-dimensional decision maps around a near-tie point and their irregularity metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .common import check_unit, local_map

TOKEN_1 = 0
TOKEN_2 = 1
OVERFLOW = 2


@dataclass(frozen=True)
class DecisionMetrics:
    flip_frequency: float
    fragmentation: int
    crossing_density: float


def flip_frequency(grid) -> float:
    """Share of 4-neighbour cell pairs whose labels differ."""
    g = np.asarray(grid)
    horiz = g[:, 1:] != g[:, :-1]
    vert = g[1:, :] != g[:-1, :]
    pairs = horiz.size + vert.size
    return float((horiz.sum() + vert.sum()) / pairs) if pairs else 0.0


def fragmentation(grid) -> int:
    """Number of 4-connected same-label regions."""
    g = np.asarray(grid)
    total = 0
    for value in np.unique(g):
        _, n = ndimage.label(g == value)
        total += n
    return int(total)


def crossing_density(grid) -> float:
    """Label changes along every row and column scan, over ``rows + cols``."""
    g = np.asarray(grid)
    changes = (g[:, 1:] != g[:, :-1]).sum() + (g[1:, :] != g[:-1, :]).sum()
    return float(changes / (g.shape[0] + g.shape[1]))


def grid_metrics(grid) -> DecisionMetrics:
    return DecisionMetrics(flip_frequency(grid), fragmentation(grid), crossing_density(grid))


@dataclass(frozen=True)
class DecisionMap:
    """Winner labels over ``x0 + e1*dir_i + e2*dir_j``; rows follow ``e2``, columns ``e1``.

    Labels: 0 when the base point's leading token keeps ``L1 >= L2``, 1 when
    the runner-up wins, 2 when some third token overtakes both.
    """

    grid: np.ndarray
    offsets: np.ndarray
    labels: tuple[str, str]
    tokens: tuple[int, int]
    flip_frequency: float
    fragmentation: int
    crossing_density: float

    @property
    def overflow_cells(self) -> int:
        return int((self.grid == OVERFLOW).sum())

    @classmethod
    def from_grid(cls, grid, offsets=None, labels=("i", "j"), tokens=(0, 1)) -> DecisionMap:
        grid = np.asarray(grid)
        m = grid_metrics(grid)
        if offsets is None:
            offsets = np.arange(grid.shape[0], dtype=np.float64)
        return cls(grid, np.asarray(offsets), tuple(labels), tuple(tokens),
                   m.flip_frequency, m.fragmentation, m.crossing_density)


def grid_offsets(eps_range: float, step: float) -> np.ndarray:
    n = int(round(2 * eps_range / step)) + 1
    return np.linspace(-eps_range, eps_range, n)


def decision_map(model, x0, dir_i, dir_j, eps_range: float = 1e-8, step: float = 2e-10,
                 labels=("i", "j")) -> DecisionMap:
    lm = local_map(model, x0)
    if lm.unembedding is None:
        raise ValueError("decision maps need an unembedding")
    a, b = check_unit(dir_i), check_unit(dir_j)
    _, z0 = lm.evaluate(lm.x0[None])
    order = np.argsort(-z0[0].astype(np.float64), kind="stable")
    t1, t2 = int(order[0]), int(order[1])
    e = grid_offsets(eps_range, step)
    e2, e1 = np.meshgrid(e, e, indexing="ij")
    delta = e1.reshape(-1, 1) * a + e2.reshape(-1, 1) * b
    mode = lm.precision
    xs = mode.add(lm.x0, mode.round(delta))
    _, z = lm.evaluate(xs)
    z = z.astype(np.float64)
    l1, l2 = z[:, t1], z[:, t2]
    others = z.copy()
    others[:, [t1, t2]] = -np.inf
    grid = np.where(l1 >= l2, TOKEN_1, TOKEN_2)
    grid = np.where(others.max(axis=1) > np.maximum(l1, l2), OVERFLOW, grid)
    return DecisionMap.from_grid(grid.reshape(e.size, e.size), e, labels, (t1, t2))
