"""Execute one configured probe and turn its output into a :class:`Table`."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import probes as P
from .config import ConfigError, RunConfig
from .model import EmbeddingPoint, build_model
from .probes.boundary import angle_directions, boundary_search
from .probes.common import RegimeThresholds
from .report import Table
from .spectrum import (
    SpectrumResult,
    default_fd_step,
    load_spectrum,
    model_spectrum,
    save_spectrum,
    spectrum_cache_key,
)

# CSV schemas, one per probe; every column is a record field.
COLUMNS = {
    "directional_sweep": ["direction", "eps", "d_eff", "bitwise_constant", "regime", "flagged"],
    "layerwise_gain": ["eps", "layer", "direction", "gain"],
    "instability_sweep": ["index", "s", "inst", "cumulative", "margin", "stall"],
    "micro_continuity": ["index", "s", "step_norm", "cumulative", "stall"],
    "decision_map": ["row", "col", "e1", "e2", "label"],
    "angular_boundary": ["theta", "s_max", "s_next_flips", "search_evals", "status"],
    "spectrum_boundary": ["k", "sigma", "s_max", "s_next_flips", "search_evals", "status"],
    "noise_averaged_kappa": ["direction", "eps", "n_samples", "repeat", "kappa_smooth"],
}


@dataclass
class ProbeOutcome:
    table: Table
    summary: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)
    flagged: int = 0          # records with non-finite values
    exhausted: int = 0        # searches that ran out of budget


class Setup:
    """The model, base point and (lazily) its reference spectrum for one run."""

    def __init__(self, cfg: RunConfig, cache_dir: str | Path | None = None):
        self.cfg = cfg
        self.model = build_model(cfg.model)
        self.point = EmbeddingPoint.random(cfg.model, cfg.point.seed, cfg.point.scale, cfg.point.perturb_position)
        self.lm = self.model.local_map(self.point)
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self._spectrum: SpectrumResult | None = None
        self.spectrum_source = "unused"

    @property
    def dim(self) -> int:
        return self.lm.x0.size

    def spectrum_path(self) -> Path | None:
        if self.cache_dir is None:
            return None
        step = default_fd_step(self.point.slice)
        return self.cache_dir / f"spectrum-{spectrum_cache_key(self.model, self.point, step)}.npz"

    @property
    def spectrum(self) -> SpectrumResult:
        if self._spectrum is None:
            path = self.spectrum_path()
            if path is not None and path.exists():
                self._spectrum = load_spectrum(path)
                self.spectrum_source = f"cache:{path.name}"
            else:
                self._spectrum = model_spectrum(self.model, self.point)
                self.spectrum_source = "computed"
                if path is not None:
                    path.parent.mkdir(parents=True, exist_ok=True)
                    save_spectrum(self._spectrum, path)
        return self._spectrum


_SINGLE = re.compile(r"^(v|rand)(\d+)$")
_MULTI = re.compile(r"^(random|spanning):(\d+)$")


def resolve_directions(spec, setup: Setup, seed: int = 0) -> list[tuple[str, np.ndarray]]:
    """Directions from ``"v3"``, ``"rand2"``, ``"random:N"``, ``"spanning:N"``, ``"all"`` or a list of those."""
    if isinstance(spec, list):
        out = []
        for item in spec:
            out.extend(resolve_directions(item, setup, seed))
        return out
    if not isinstance(spec, str):
        raise ConfigError(f"direction spec must be a string or list, got {spec!r}")
    if spec == "all":
        return [(f"v{k + 1}", setup.spectrum.direction(k)) for k in range(setup.dim)]
    m = _MULTI.match(spec)
    if m:
        n = int(m.group(2))
        if m.group(1) == "random":
            return P.random_directions(n, setup.dim, seed)
        return [(f"v{k + 1}", setup.spectrum.direction(k)) for k in setup.spectrum.spanning_indices(n)]
    m = _SINGLE.match(spec)
    if m:
        i = int(m.group(2))
        if m.group(1) == "v":
            if not 1 <= i <= setup.dim:
                raise ConfigError(f"singular direction {spec!r} out of range 1..{setup.dim}")
            return [(spec, setup.spectrum.direction(i - 1))]
        return [P.random_directions(i + 1, setup.dim, seed)[i]]
    raise ConfigError(f"unrecognised direction spec {spec!r}")


def _single_direction(spec, setup, seed) -> tuple[str, np.ndarray]:
    dirs = resolve_directions(spec, setup, seed)
    if len(dirs) != 1:
        raise ConfigError(f"expected a single direction, {spec!r} names {len(dirs)}")
    return dirs[0]


def _plane(spec, setup) -> tuple[int, int]:
    if len(spec) != 2 or not all(isinstance(k, int) for k in spec):
        raise ConfigError("probe.plane must be two singular-vector indices, e.g. [1, 2]")
    i, j = spec
    for k in (i, j):
        if not 1 <= k <= setup.dim:
            raise ConfigError(f"probe.plane index {k} out of range 1..{setup.dim}")
    if i == j:
        raise ConfigError("probe.plane indices must differ")
    return i, j


def _boundary_start(setup, direction, start, half_width) -> tuple[float, dict]:
    if isinstance(start, float):
        return start, {"start": start}
    if start != "boundary":
        raise ConfigError(f"probe.start must be a number or 'boundary', got {start!r}")
    res = boundary_search(setup.lm, setup.point, direction[None], ["start"])[0]
    if res.status != "ok":
        raise P.SearchBudgetExhausted(f"boundary search for the sweep start ended with status {res.status!r}")
    return res.s_max - half_width, {"start": res.s_max - half_width, "boundary_s_max": res.s_max}


def run_directional_sweep(setup: Setup, p: dict) -> ProbeOutcome:
    th = RegimeThresholds(p["chaos"], p["signal_low"], p["signal_high"])
    if not 0 < p["eps_min"] < p["eps_max"] or p["n_eps"] < 1:
        raise ConfigError("probe.eps_min/eps_max/n_eps must describe a positive increasing grid")
    grid = P.log_grid(p["eps_min"], p["eps_max"], p["n_eps"])
    dirs = resolve_directions(p["directions"], setup, p["direction_seed"])
    sp = setup.spectrum
    recs = P.directional_sweep(setup.lm, sp, P.SweepConfig(grid, dirs, setup.model.precision, setup.point, th))
    table = Table("directional_sweep", COLUMNS["directional_sweep"],
                  [(r.direction_label, r.eps, r.d_eff, r.bitwise_constant, r.regime.value, r.flagged) for r in recs])
    ordered = sum(P.is_ordered_trichotomy([r.regime for r in recs if r.direction_label == lab]) for lab, _ in dirs)
    summary = {"sigma_max": float(sp.sigma[0]), "sigma_min": float(sp.sigma[-1]),
               "directions": len(dirs), "ordered_trichotomy": int(ordered)}
    return ProbeOutcome(table, summary, th.to_dict(), flagged=sum(r.flagged for r in recs))


def run_layerwise_gain(setup: Setup, p: dict) -> ProbeOutcome:
    dirs = resolve_directions(p["directions"], setup, p["direction_seed"])
    g = P.layerwise_gain(setup.lm, setup.spectrum, p["eps"], dirs, setup.point)
    rows = [(g.eps, layer, label, gain) for layer, label, gain in g.rows()]
    return ProbeOutcome(Table("layerwise_gain", COLUMNS["layerwise_gain"], rows),
                        {"bitwise_constant": int(g.bitwise_constant.sum())},
                        flagged=int(np.isnan(g.gains).sum()))


def run_instability_sweep(setup: Setup, p: dict) -> ProbeOutcome:
    label, v = _single_direction(p["direction"], setup, p["direction_seed"])
    n, delta = p["n_points"], p["delta"]
    if n < 2 or not delta > 0:
        raise ConfigError("probe.n_points must be >= 2 and probe.delta positive")
    start, info = _boundary_start(setup, v, p["start"], (n // 2) * delta)
    eps = start + delta * np.arange(n)
    sw = P.instability_sweep(setup.lm, setup.point, v, eps)
    inst = np.concatenate([[np.nan], sw.inst])
    stall = np.concatenate([[False], sw.inst == 0])
    rows = [(i, sw.eps[i], inst[i], sw.drift[i], sw.margin[i], bool(stall[i])) for i in range(n)]
    s = sw.summary
    summary = {"direction": label, **info, "mean_inst": s.mean_inst, "median_inst": s.median_inst,
               "max_drift": s.max_drift, "mean_margin": s.mean_margin, "min_margin": s.min_margin,
               "stall_fraction": float((sw.inst == 0).mean())}
    return ProbeOutcome(Table("instability_sweep", COLUMNS["instability_sweep"], rows), summary)


def run_micro_continuity(setup: Setup, p: dict) -> ProbeOutcome:
    label, v = _single_direction(p["direction"], setup, p["direction_seed"])
    n, delta = p["n_steps"], p["delta"]
    if n < 1 or not delta > 0:
        raise ConfigError("probe.n_steps must be >= 1 and probe.delta positive")
    start, info = _boundary_start(setup, v, p["start"], (n // 2) * delta)
    try:
        st = P.micro_continuity(setup.lm, setup.point, v, start, n, delta)
    except ValueError as exc:
        raise ConfigError(f"probe.delta: {exc}") from None
    step = np.concatenate([[np.nan], st.step_norm])
    stall = np.concatenate([[False], st.stall])
    rows = [(i, st.s[i], step[i], st.cumulative[i], bool(stall[i])) for i in range(n + 1)]
    summary = {"direction": label, **info, "stalls": st.stall_count, "jumps": st.jump_count}
    return ProbeOutcome(Table("micro_continuity", COLUMNS["micro_continuity"], rows), summary)


def run_decision_map(setup: Setup, p: dict) -> ProbeOutcome:
    i, j = _plane(p["plane"], setup)
    tie = P.find_near_tie(setup.lm, setup.point, setup.spectrum, tol=p["tie_tolerance"])
    tie_sp = model_spectrum(setup.model, tie)
    lt = setup.model.local_map(tie)
    dm = P.decision_map(lt, tie, tie_sp.direction(i - 1), tie_sp.direction(j - 1),
                        p["eps_range"], p["step"], (f"v{i}", f"v{j}"))
    e = dm.offsets
    rows = [(r, c, e[c], e[r], int(dm.grid[r, c])) for r in range(e.size) for c in range(e.size)]
    _, z = lt.evaluate(lt.x0[None])
    z = np.sort(z[0].astype(np.float64))
    summary = {"plane": [f"v{i}", f"v{j}"], "tokens": list(dm.tokens), "tie_margin": float(z[-1] - z[-2]),
               "flip_frequency": dm.flip_frequency, "fragmentation": dm.fragmentation,
               "crossing_density": dm.crossing_density, "overflow_cells": dm.overflow_cells,
               "grid": list(dm.grid.shape)}
    return ProbeOutcome(Table("decision_map", COLUMNS["decision_map"], rows), summary,
                        {"tie_tolerance": p["tie_tolerance"]})


def _search_kw(p):
    if not 0 < p["s_init"] <= p["s_cap"]:
        raise ConfigError("probe.s_init must be positive and no larger than probe.s_cap")
    return {"s_init": p["s_init"], "s_cap": p["s_cap"]}


def _boundary_summary(results):
    s = np.array([r.s_max for r in results])
    statuses = {}
    for r in results:
        statuses[r.status] = statuses.get(r.status, 0) + 1
    ok = s[[r.status == "ok" for r in results]]
    spread = float(ok.max() / ok.min()) if ok.size and ok.min() > 0 else float("nan")
    return {"statuses": statuses, "s_max_min": float(s.min()), "s_max_max": float(s.max()), "spread": spread}


def run_angular_boundary(setup: Setup, p: dict) -> ProbeOutcome:
    i, j = _plane(p["plane"], setup)
    if p["n_angles"] < 1:
        raise ConfigError("probe.n_angles must be positive")
    sp = setup.spectrum
    theta, dirs = angle_directions(sp.direction(i - 1), sp.direction(j - 1), p["n_angles"])
    res = boundary_search(setup.lm, setup.point, dirs, [f"{t}" for t in theta], **_search_kw(p))
    rows = [(t, r.s_max, r.s_next_flips, r.search_evals, r.status) for t, r in zip(theta, res)]
    return ProbeOutcome(Table("angular_boundary", COLUMNS["angular_boundary"], rows),
                        {"plane": [f"v{i}", f"v{j}"], **_boundary_summary(res)}, _search_kw(p),
                        exhausted=sum(r.status == "budget" for r in res))


def run_spectrum_boundary(setup: Setup, p: dict) -> ProbeOutcome:
    idx = p["indices"]
    if idx == "all":
        ks = None
    elif isinstance(idx, list) and all(isinstance(k, int) and 1 <= k <= setup.dim for k in idx):
        ks = [k - 1 for k in idx]
    else:
        raise ConfigError(f"probe.indices must be 'all' or a list of indices in 1..{setup.dim}")
    out = P.spectrum_boundary(setup.lm, setup.point, setup.spectrum, ks, **_search_kw(p))
    rows = [(k + 1, sigma, r.s_max, r.s_next_flips, r.search_evals, r.status) for k, sigma, r in out]
    res = [r for *_, r in out]
    sig = setup.spectrum.sigma
    summary = {**_boundary_summary(res), "sigma_ratio": float(sig[0] / sig[-1])}
    return ProbeOutcome(Table("spectrum_boundary", COLUMNS["spectrum_boundary"], rows), summary, _search_kw(p),
                        exhausted=sum(r.status == "budget" for r in res))


def chaotic_eps(setup: Setup, label: str, v) -> tuple[float, float]:
    """The default-grid eps with the largest chaotic ``d_eff`` along ``v``."""
    recs = P.directional_sweep(setup.lm, setup.spectrum,
                               P.SweepConfig(P.log_grid(), [(label, v)], setup.model.precision, setup.point))
    chaotic = [r for r in recs if r.regime is P.Regime.CHAOTIC]
    if not chaotic:
        raise P.SearchBudgetExhausted(f"no chaotic eps found along {label} on the default grid")
    best = max(chaotic, key=lambda r: r.d_eff)
    return best.eps, best.d_eff


def run_noise_averaged_kappa(setup: Setup, p: dict) -> ProbeOutcome:
    label, v = _single_direction(p["direction"], setup, p["direction_seed"])
    ns = p["n_samples"]
    if not ns or not all(isinstance(n, int) and n >= 1 for n in ns) or p["repeats"] < 1:
        raise ConfigError("probe.n_samples must be positive integers and probe.repeats >= 1")
    summary = {"direction": label}
    if p["eps"] == "chaotic":
        eps, d_eff = chaotic_eps(setup, label, v)
        summary["reference_d_eff"] = d_eff
    elif isinstance(p["eps"], float) and p["eps"] > 0:
        eps = p["eps"]
    else:
        raise ConfigError("probe.eps must be a positive number or 'chaotic'")
    summary["eps"] = eps
    rows, stds = [], {}
    for n in ns:
        ks = [P.noise_averaged_kappa(setup.lm, setup.point, v, eps, n, p["noise_mag"], seed=r)
              for r in range(p["repeats"])]
        rows.extend((label, eps, n, r, k) for r, k in enumerate(ks))
        stds[str(n)] = float(np.std(ks, ddof=1)) if len(ks) > 1 else 0.0
    summary["std_by_n"] = stds
    flagged = sum(not np.isfinite(r[-1]) for r in rows)
    return ProbeOutcome(Table("noise_averaged_kappa", COLUMNS["noise_averaged_kappa"], rows), summary,
                        {"noise_mag": p["noise_mag"]}, flagged=flagged)


RUNNERS = {
    "directional_sweep": run_directional_sweep,
    "layerwise_gain": run_layerwise_gain,
    "instability_sweep": run_instability_sweep,
    "micro_continuity": run_micro_continuity,
    "decision_map": run_decision_map,
    "angular_boundary": run_angular_boundary,
    "spectrum_boundary": run_spectrum_boundary,
    "noise_averaged_kappa": run_noise_averaged_kappa,
}


def execute(cfg: RunConfig, cache_dir=None) -> tuple[ProbeOutcome, Setup]:
    setup = Setup(cfg, cache_dir)
    outcome = RUNNERS[cfg.probe.kind](setup, cfg.probe.params)
    outcome.summary["spectrum"] = setup.spectrum_source
    return outcome, setup
