"""Deterministic SVG figures for probe tables.

Every renderer takes the rows of a probe CSV (strings or numbers) and
returns SVG text.  Output is byte-stable: no creation date, fixed element
ids, text kept as text rather than glyph paths.
"""

from __future__ import annotations

import enum
import io
from collections import OrderedDict

import matplotlib
import numpy as np
from matplotlib.colors import ListedColormap
from matplotlib.figure import Figure

_RC = {"svg.hashsalt": "chaoscope", "svg.fonttype": "none", "font.family": "DejaVu Sans"}


class PlotKind(enum.Enum):
    EPS_SWEEP = "EpsSweep"
    LAYER_GAIN = "LayerGain"
    STAIRCASE = "Staircase"
    DECISION_MAP = "DecisionMap"
    ANGULAR_POLAR = "AngularPolar"
    SPECTRUM_SCATTER = "SpectrumScatter"
    CONVERGENCE = "Convergence"

    @classmethod
    def parse(cls, value) -> PlotKind:
        if isinstance(value, cls):
            return value
        for k in cls:
            if str(value).lower() in (k.value.lower(), k.name.lower()):
                return k
        raise ValueError(f"unknown plot kind {value!r} (expected one of {', '.join(k.value for k in cls)})")


REQUIRED = {
    PlotKind.EPS_SWEEP: ("direction", "eps", "d_eff", "bitwise_constant"),
    PlotKind.LAYER_GAIN: ("layer", "direction", "gain"),
    PlotKind.STAIRCASE: ("s", "cumulative", "stall"),
    PlotKind.DECISION_MAP: ("row", "col", "label"),
    PlotKind.ANGULAR_POLAR: ("theta", "s_max"),
    PlotKind.SPECTRUM_SCATTER: ("sigma", "s_max"),
    PlotKind.CONVERGENCE: ("n_samples", "kappa_smooth"),
}

# probe table -> figure type
DEFAULT_KIND = {
    "directional_sweep": PlotKind.EPS_SWEEP,
    "layerwise_gain": PlotKind.LAYER_GAIN,
    "instability_sweep": PlotKind.STAIRCASE,
    "micro_continuity": PlotKind.STAIRCASE,
    "decision_map": PlotKind.DECISION_MAP,
    "angular_boundary": PlotKind.ANGULAR_POLAR,
    "spectrum_boundary": PlotKind.SPECTRUM_SCATTER,
    "noise_averaged_kappa": PlotKind.CONVERGENCE,
}


def _f(rows, key) -> np.ndarray:
    return np.array([float(r[key]) for r in rows], dtype=np.float64)


def _b(rows, key) -> np.ndarray:
    return np.array([str(r[key]).lower() in ("true", "1") for r in rows])


def _groups(rows, key) -> OrderedDict:
    out: OrderedDict = OrderedDict()
    for r in rows:
        out.setdefault(str(r[key]), []).append(r)
    return out


def _eps_sweep(fig, rows):
    ax = fig.add_subplot()
    lowest = np.inf
    for label, grp in _groups(rows, "direction").items():
        eps, d = _f(grp, "eps"), _f(grp, "d_eff")
        keep = d > 0
        ax.plot(eps[keep], d[keep], lw=0.9, label=label)
        if keep.any():
            lowest = min(lowest, d[keep].min())
    const_eps = _f([r for r in rows if str(r["bitwise_constant"]).lower() == "true"], "eps")
    if const_eps.size and np.isfinite(lowest):
        ax.plot(const_eps, np.full(const_eps.size, lowest / 3), "|", color="0.4", ms=6, label="bitwise constant")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("eps")
    ax.set_ylabel("D(eps, v)")
    _legend(ax)


def _layer_gain(fig, rows):
    ax = fig.add_subplot()
    for label, grp in _groups(rows, "direction").items():
        ax.plot(_f(grp, "layer"), _f(grp, "gain"), marker="o", ms=3, lw=0.9, label=label)
    ax.set_yscale("log")
    ax.set_xlabel("layer tap")
    ax.set_ylabel("gain")
    _legend(ax)


def _staircase(fig, rows):
    ax = fig.add_subplot()
    s, cum, stall = _f(rows, "s"), _f(rows, "cumulative"), _b(rows, "stall")
    ax.step(s - s[0], cum, where="post", lw=0.9, color="k")
    jumps = ~stall
    jumps[0] = False
    ax.plot((s - s[0])[jumps], cum[jumps], "o", ms=3, color="C3", label="jump")
    ax.set_xlabel(f"s - {s[0]:.6e}")
    ax.set_ylabel("||M(s) - M(s_0)||")
    _legend(ax)


def _decision_map(fig, rows):
    r, c, lab = (_f(rows, k).astype(int) for k in ("row", "col", "label"))
    grid = np.zeros((r.max() + 1, c.max() + 1), dtype=np.uint8)
    grid[r, c] = lab
    ax = fig.add_subplot()
    # white: L1 >= L2, black: runner-up wins, grey: a third token wins
    cmap = ListedColormap(["white", "black", "0.6"])
    ax.imshow(grid, cmap=cmap, vmin=0, vmax=2, origin="lower", interpolation="none")
    ax.set_xlabel("e1 index")
    ax.set_ylabel("e2 index")


def _angular(fig, rows):
    ax = fig.add_subplot(projection="polar")
    theta, s = _f(rows, "theta"), _f(rows, "s_max")
    order = np.argsort(theta, kind="stable")
    ax.plot(np.append(theta[order], theta[order][0]), np.append(s[order], s[order][0]), lw=0.9)
    ax.set_title("s_max(theta)")


def _spectrum_scatter(fig, rows):
    ax = fig.add_subplot()
    ax.scatter(_f(rows, "sigma"), _f(rows, "s_max"), s=8)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("sigma_k")
    ax.set_ylabel("s_max(v_k)")


def _convergence(fig, rows):
    ax = fig.add_subplot()
    n, k = _f(rows, "n_samples"), _f(rows, "kappa_smooth")
    ax.plot(n, k, ".", color="0.5", ms=4, label="repeats")
    levels = np.unique(n)
    means = np.array([k[n == v].mean() for v in levels])
    stds = np.array([k[n == v].std(ddof=1) if (n == v).sum() > 1 else 0.0 for v in levels])
    ax.errorbar(levels, means, yerr=stds, color="k", capsize=3, lw=0.9, label="mean +/- std")
    ax.set_xscale("log")
    ax.set_xlabel("n samples")
    ax.set_ylabel("kappa_smooth")
    _legend(ax)


def _legend(ax):
    handles, _ = ax.get_legend_handles_labels()
    if 0 < len(handles) <= 12:
        ax.legend(fontsize=7, loc="best")


_RENDER = {
    PlotKind.EPS_SWEEP: _eps_sweep,
    PlotKind.LAYER_GAIN: _layer_gain,
    PlotKind.STAIRCASE: _staircase,
    PlotKind.DECISION_MAP: _decision_map,
    PlotKind.ANGULAR_POLAR: _angular,
    PlotKind.SPECTRUM_SCATTER: _spectrum_scatter,
    PlotKind.CONVERGENCE: _convergence,
}


def plot(records, kind) -> str:
    """Render ``records`` (a list of row mappings) as an SVG document."""
    kind = PlotKind.parse(kind)
    records = list(records)
    if not records:
        raise ValueError("no records to plot")
    missing = [c for c in REQUIRED[kind] if c not in records[0]]
    if missing:
        raise ValueError(f"records do not match plot kind {kind.value}: missing column {missing[0]!r}")
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(6.4, 4.8))
        _RENDER[kind](fig, records)
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
    return buf.getvalue()
