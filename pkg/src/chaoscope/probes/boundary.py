"""ULP-exact stability boundaries and near-tie construction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..model import EmbeddingPoint, logit_margin
from ..numerics import PrecisionMode, nextafter
from ..spectrum import SpectrumResult
from .common import bitwise_equal_rows, check_unit, local_map, perturb

S_INIT = 1e-14
S_CAP = 1.0


class SearchBudgetExhausted(RuntimeError):
    """A line or boundary search ran out of evaluations."""


@dataclass(frozen=True)
class BoundaryResult:
    """Largest lattice magnitude ``s_max`` that leaves the output bitwise unchanged.

    ``status`` is ``"ok"`` when ``nextafter(s_max)`` changes the output,
    ``"unbounded"`` when nothing changed up to the search cap, and
    ``"unstable"`` when even the smallest positive magnitude changed it.
    """

    direction_label: str
    s_max: float
    s_next_flips: bool
    search_evals: int
    status: str = "ok"


def _changed(lm, m0, s, dirs) -> np.ndarray:
    m = lm.lst(perturb(lm, s, dirs))
    return ~bitwise_equal_rows(m, m0)


def boundary_search(model, base, directions, labels=None, s_init: float = S_INIT, s_cap: float = S_CAP,
                    lattice: PrecisionMode = PrecisionMode.FP32, max_bisect: int = 200,
                    max_refine: int = 64) -> list[BoundaryResult]:
    """Exponential, then binary, then ULP search for ``s_max`` along each direction.

    All directions advance in lock step so each stage is one batched
    evaluation.  Magnitudes live in ``lattice``.
    """
    lm = local_map(model, base)
    dirs = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    B = dirs.shape[0]
    labels = list(labels) if labels is not None else [f"d{i}" for i in range(B)]
    m0 = lm.lst(lm.x0[None])
    dt = lattice.dtype
    tiny = nextafter(0.0, "up", lattice)
    cap = lattice.round(s_cap)
    evals = np.zeros(B, dtype=int)
    status = np.array(["ok"] * B, dtype=object)

    # exponential stage: hi flips, lo does not
    s = np.full(B, lattice.round(s_init), dtype=dt)
    flip0 = _changed(lm, m0, s, dirs)
    evals += 1
    lo = np.where(flip0, 0, s).astype(dt)
    hi = np.where(flip0, s, np.inf).astype(dt)

    active = flip0.copy()          # shrink until stable
    while active.any():
        idx = np.flatnonzero(active)
        cand = lattice.round(hi[idx] / 2)
        at_floor = cand < tiny
        cand = np.where(at_floor, tiny, cand)
        f = _changed(lm, m0, cand, dirs[idx])
        evals[idx] += 1
        hi[idx[f]] = cand[f]
        stop = ~f | at_floor
        lo[idx[~f]] = cand[~f]
        dead = idx[f & at_floor]
        status[dead] = "unstable"
        active[idx[stop]] = False

    active = ~flip0                # grow until unstable
    while active.any():
        idx = np.flatnonzero(active)
        cand = np.minimum(lattice.round(lo[idx] * 2), cap)
        f = _changed(lm, m0, cand, dirs[idx])
        evals[idx] += 1
        hi[idx[f]] = cand[f]
        lo[idx[~f]] = cand[~f]
        capped = ~f & (cand >= cap)
        status[idx[capped]] = "unbounded"
        active[idx[f | capped]] = False

    # binary stage on value midpoints, rounded into the lattice
    active = status == "ok"
    for _ in range(max_bisect):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        mid = lattice.round((lo[idx].astype(np.float64) + hi[idx].astype(np.float64)) / 2)
        done = (mid <= lo[idx]) | (mid >= hi[idx])
        active[idx[done]] = False
        idx, mid = idx[~done], mid[~done]
        if idx.size == 0:
            break
        f = _changed(lm, m0, mid, dirs[idx])
        evals[idx] += 1
        hi[idx[f]] = mid[f]
        lo[idx[~f]] = mid[~f]

    # ULP refinement: walk lo up until its lattice successor flips
    ok = np.flatnonzero(status == "ok")
    flips = np.zeros(B, dtype=bool)
    pending = ok.copy()
    for _ in range(max_refine):
        if pending.size == 0:
            break
        nxt = nextafter(lo[pending], "up", lattice)
        f = _changed(lm, m0, nxt, dirs[pending])
        evals[pending] += 1
        flips[pending[f]] = True
        lo[pending[~f]] = nxt[~f]
        pending = pending[~f]
    status[pending] = "budget"

    out = []
    for i in range(B):
        out.append(BoundaryResult(labels[i], float(lo[i]), bool(flips[i]), int(evals[i]), str(status[i])))
    return out


def verify_boundaries(model, base, directions, results, lattice=PrecisionMode.FP32) -> np.ndarray:
    """Re-evaluate each result: unchanged at ``s_max`` and changed one ulp above."""
    lm = local_map(model, base)
    dirs = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    m0 = lm.lst(lm.x0[None])
    s = np.array([r.s_max for r in results], dtype=lattice.dtype)
    stable = ~_changed(lm, m0, s, dirs)
    above = _changed(lm, m0, nextafter(s, "up", lattice), dirs)
    return stable & above


def angle_directions(dir_a, dir_b, n_angles: int) -> tuple[np.ndarray, np.ndarray]:
    a, b = check_unit(dir_a), check_unit(dir_b)
    if abs(a @ b) > 1e-10:
        raise ValueError(f"plane directions are not orthogonal (a.b = {a @ b:.3e})")
    theta = 2 * np.pi * np.arange(n_angles) / n_angles
    return theta, np.cos(theta)[:, None] * a + np.sin(theta)[:, None] * b


def angular_boundary(model, x0, dir_a, dir_b, n_angles: int = 360, **search) -> list[BoundaryResult]:
    """``s_max(theta)`` along ``cos(theta) a + sin(theta) b`` for evenly spaced angles."""
    theta, dirs = angle_directions(dir_a, dir_b, n_angles)
    labels = [f"theta={t:.6f}" for t in theta]
    return boundary_search(model, x0, dirs, labels, **search)


def spectrum_boundary(model, x0, spectrum: SpectrumResult, indices=None, **search):
    """``(k, sigma_k, BoundaryResult)`` for each right singular vector ``v_k``."""
    ks = list(range(len(spectrum))) if indices is None else list(indices)
    dirs = np.stack([spectrum.direction(k) for k in ks])
    res = boundary_search(model, x0, dirs, [f"v{k + 1}" for k in ks], **search)
    return [(k, float(spectrum.sigma[k]), r) for k, r in zip(ks, res)]


# -- near ties -------------------------------------------------------------------


class NoNearTie(SearchBudgetExhausted):
    pass


def find_near_tie(model, start, spectrum: SpectrumResult | None = None, direction=None, tol: float = 1e-4,
                  s0: float | None = None, budget: int = 60, bisect_budget: int = 200):
    """Move the base point along a direction until the top-2 logit margin is ``<= tol``.

    A doubling line search in both senses along ``direction`` (default
    ``v_1``) finds a magnitude where the runner-up overtakes the leader; the
    segment is then bisected on the signed logit difference.  Returns an
    :class:`EmbeddingPoint` for the toy model or a vector for an oracle.
    """
    lm = local_map(model, start)
    if lm.unembedding is None:
        raise ValueError("near-tie search needs an unembedding")
    m0, z0 = lm.evaluate(lm.x0[None])
    if logit_margin(z0)[0] <= tol:
        return start
    v = check_unit(direction if direction is not None else spectrum.direction(0))
    order = np.argsort(-z0[0].astype(np.float64), kind="stable")
    t1, t2 = int(order[0]), int(order[1])

    def gap(s):
        _, z = lm.evaluate(perturb(lm, np.atleast_1d(s), v))
        z = z.astype(np.float64)
        return z[:, t1] - z[:, t2], z

    if s0 is None:
        s0 = 1e-6 * max(1.0, float(np.linalg.norm(lm.x0)))
    ladder = s0 * 2.0 ** np.arange(budget)
    ladder = np.concatenate([ladder, -ladder])
    g, _ = gap(ladder)
    crossed = np.flatnonzero(g < 0)
    if crossed.size == 0:
        raise NoNearTie(f"no near-tie reachable along this direction within {budget} doublings")
    hi = ladder[crossed[np.argmin(np.abs(ladder[crossed]))]]
    lo = 0.0
    best_s, best_margin = 0.0, float(logit_margin(z0)[0])
    for _ in range(bisect_budget):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        gm, z = gap(mid)
        margin = float(logit_margin(z)[0])
        top2 = set(np.argsort(-z[0], kind="stable")[:2].tolist())
        if top2 == {t1, t2} and margin < best_margin:
            best_s, best_margin = mid, margin
        if best_margin <= tol:
            break
        if gm[0] < 0:
            hi = mid
        else:
            lo = mid
    if best_margin > tol:
        raise NoNearTie(f"bisection stalled at margin {best_margin:.3e} > tol {tol:.1e}")
    x = perturb(lm, np.array([best_s]), v)[0]
    if isinstance(start, EmbeddingPoint):
        return start.with_slice(np.asarray(x, dtype=np.float64))
    return np.asarray(x, dtype=np.float64)
