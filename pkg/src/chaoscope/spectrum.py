"""Reference Jacobian spectra: central differences plus one-sided Jacobi SVD."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .model import EmbeddingPoint, LinearOracle, NumericalAbort, ToyModel
from .numerics import PrecisionMode

__all__ = [
    "SpectrumResult",
    "SvdNotConverged",
    "fd_jacobian",
    "svd",
    "model_spectrum",
    "oracle_spectrum",
    "default_fd_step",
    "spectrum_cache_key",
    "save_spectrum",
    "load_spectrum",
]


class SvdNotConverged(RuntimeError):
    def __init__(self, sweeps: int, residual: float):
        super().__init__(f"Jacobi SVD did not converge in {sweeps} sweeps (off-diagonal residual {residual:.3e})")
        self.sweeps = sweeps
        self.residual = residual


@dataclass(frozen=True)
class SpectrumResult:
    """Singular triplets of a Jacobian, sorted by descending ``sigma``.

    ``v`` and ``u`` hold the singular vectors as columns.
    """

    sigma: np.ndarray
    v: np.ndarray
    u: np.ndarray
    base_point: EmbeddingPoint | np.ndarray | None = None
    fd_step: float = 0.0

    def __len__(self) -> int:
        return self.sigma.size

    def direction(self, k: int) -> np.ndarray:
        """Right singular vector ``k`` (0-based)."""
        return self.v[:, k].copy()

    def spanning_indices(self, count: int) -> list[int]:
        """``count`` indices spread evenly over the spectrum, first and last included."""
        n = self.sigma.size
        return sorted(set(np.linspace(0, n - 1, count).round().astype(int).tolist()))

    @property
    def condition(self) -> float:
        return float(self.sigma[0] / self.sigma[-1]) if self.sigma[-1] > 0 else float("inf")

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


def default_fd_step(x) -> float:
    return 1e-5 * max(1.0, float(np.max(np.abs(x))))


def fd_jacobian(f: Callable[[np.ndarray], np.ndarray], x, step: float | None = None) -> np.ndarray:
    """Central-difference Jacobian of ``f`` at ``x`` in float64.

    ``f`` is called once with a ``(2n, n)`` stack of probe points (``x +
    step*e_i`` then ``x - step*e_i``) and must return a ``(2n, m)`` array.
    """
    x = np.asarray(x, dtype=np.float64)
    if step is None:
        step = default_fd_step(x)
    if not step > 0:
        raise ValueError(f"finite-difference step must be positive, got {step}")
    n = x.size
    eye = np.eye(n) * step
    probes = np.concatenate([x + eye, x - eye])
    values = np.asarray(f(probes), dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NumericalAbort("non-finite value while building the finite-difference Jacobian")
    plus, minus = values[:n], values[n:]
    return ((plus - minus) / (2.0 * step)).T


def svd(J, tol: float = 1e-15, max_sweeps: int = 80, base_point=None, fd_step: float = 0.0) -> SpectrumResult:
    """One-sided (Hestenes) Jacobi SVD with cyclic-by-row pair order.

    Column pairs are rotated until every pair is orthogonal to relative
    precision ``tol``.  Gram entries below ``(eps * ||J||_F)**2`` are treated
    as roundoff, which keeps rank-deficient inputs from spinning forever.
    """
    J = np.asarray(J, dtype=np.float64)
    if J.ndim != 2:
        raise ValueError("svd expects a matrix")
    if not np.all(np.isfinite(J)):
        raise ValueError("svd input has non-finite entries")
    m, n = J.shape
    a = J.copy()
    v = np.eye(n)
    fro = np.linalg.norm(J)
    floor = (np.finfo(np.float64).eps * fro) ** 2
    residual = 0.0
    for sweep in range(max_sweeps):
        rotated = False
        residual = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap, aq = a[:, p], a[:, q]
                alpha = ap @ ap
                beta = aq @ aq
                gamma = ap @ aq
                off = abs(gamma)
                if off <= floor or off <= tol * np.sqrt(alpha * beta):
                    continue
                residual = max(residual, off / np.sqrt(alpha * beta))
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break
    else:
        raise SvdNotConverged(max_sweeps, residual)

    sigma = np.linalg.norm(a, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    a = a[:, order]
    v = v[:, order]
    u = np.zeros((m, n))
    nz = sigma > 0
    u[:, nz] = a[:, nz] / sigma[nz]
    # make the largest-magnitude component of each v_k positive
    flip = np.sign(v[np.argmax(np.abs(v), axis=0), np.arange(n)])
    flip[flip == 0] = 1.0
    return SpectrumResult(sigma, v * flip, u * flip, base_point, fd_step)


def model_spectrum(model: ToyModel, point: EmbeddingPoint, step: float | None = None) -> SpectrumResult:
    """Spectrum of the last-state map w.r.t. the perturbed slice, evaluated in float64."""
    ref = model.at_precision(PrecisionMode.FP64).local_map(point)
    x0 = np.asarray(ref.x0, dtype=np.float64)
    step = default_fd_step(x0) if step is None else step
    J = fd_jacobian(ref.lst, x0, step)
    return svd(J, base_point=point, fd_step=step)


def oracle_spectrum(oracle: LinearOracle) -> SpectrumResult:
    """The constructed (exact) factors of a linear oracle."""
    return SpectrumResult(oracle.sigma.copy(), oracle.v.copy(), oracle.u.copy(), None, 0.0)


def spectrum_cache_key(model: ToyModel, point: EmbeddingPoint, step: float) -> str:
    h = hashlib.sha256(json.dumps(model.config.to_dict(), sort_keys=True).encode())
    h.update(point.digest().encode())
    h.update(np.float64(step).tobytes())
    return h.hexdigest()[:20]


def save_spectrum(result: SpectrumResult, path: str | Path) -> None:
    np.savez(path, sigma=result.sigma, v=result.v, u=result.u, fd_step=np.float64(result.fd_step))


def load_spectrum(path: str | Path, base_point=None) -> SpectrumResult:
    with np.load(path) as data:
        return SpectrumResult(data["sigma"], data["v"], data["u"], base_point, float(data["fd_step"]))
