import numpy as np
import pytest
from scipy.stats import spearmanr

from chaoscope.model import LinearOracle, logit_margin
from chaoscope.numerics import PrecisionMode, nextafter
from chaoscope.probes import (
    DecisionMap,
    NoNearTie,
    Regime,
    RegimeThresholds,
    SweepConfig,
    angular_boundary,
    boundary_search,
    decision_map,
    directional_sweep,
    find_near_tie,
    grid_metrics,
    instability_sweep,
    is_ordered_trichotomy,
    layerwise_gain,
    log_grid,
    micro_continuity,
    noise_averaged_kappa,
    random_directions,
    smoothed_regimes,
    spectrum_boundary,
    verify_boundaries,
)
from chaoscope.probes.instability import summarize
from chaoscope.spectrum import oracle_spectrum

FP32, FP64 = PrecisionMode.FP32, PrecisionMode.FP64


@pytest.fixture(scope="module")
def oracle():
    sigma = np.logspace(2, -2, 16)
    o = LinearOracle.from_spectrum(sigma, seed=5)
    return o, oracle_spectrum(o)


def spectral(sp, ks):
    return [(f"v{k + 1}", sp.direction(k)) for k in ks]


# -- regime classification ------------------------------------------------------------


def test_classifier_rules():
    th = RegimeThresholds()
    assert th.classify(0.0, True, 10.0, 0.1) is Regime.CONSTANT
    assert th.classify(101.0, False, 10.0, 0.1) is Regime.CHAOTIC
    assert th.classify(5.0, False, 10.0, 0.1) is Regime.SIGNAL
    assert th.classify(0.001, False, 10.0, 0.1) is Regime.UNCLASSIFIED
    assert th.classify(float("nan"), False, 10.0, 0.1) is Regime.UNCLASSIFIED


def test_hysteresis_smoothing():
    C, X, S = Regime.CONSTANT, Regime.CHAOTIC, Regime.SIGNAL
    assert smoothed_regimes([C, C, X, C, C, X, X, S, S]) == [C, X, S]
    assert is_ordered_trichotomy([C, C, X, X, S, S, X, S, S])
    assert not is_ordered_trichotomy([C, C, X, X, S, S, X, X, S, S])


def test_sweep_config_validation(oracle):
    o, sp = oracle
    with pytest.raises(ValueError):
        SweepConfig([1e-3, 1e-4], [("v1", sp.direction(0))], FP64, np.zeros(16))
    with pytest.raises(ValueError):
        SweepConfig([1e-3], [("bad", 2 * sp.direction(0))], FP64, np.zeros(16))


# -- directional sweep -----------------------------------------------------------------


def test_oracle_sweep_recovers_sigma(oracle):
    o, sp = oracle
    grid = np.logspace(-8, -1, 15)
    recs = directional_sweep(o, sp, SweepConfig(grid, spectral(sp, range(16)), FP64, np.zeros(16)))
    for r in recs:
        k = int(r.direction_label[1:]) - 1
        assert abs(r.d_eff / sp.sigma[k] - 1) <= 1e-9
        assert r.regime is Regime.SIGNAL


def test_sweep_precision_mismatch(oracle):
    o, sp = oracle
    with pytest.raises(ValueError):
        directional_sweep(o, sp, SweepConfig([1e-3], spectral(sp, [0]), FP32, np.zeros(16)))


def test_toy_sweep_constant_then_signal(toy):
    sp = toy["spectrum"]
    dirs = random_directions(5, 64, 9)
    recs = directional_sweep(toy["lm"], sp, SweepConfig(log_grid(), dirs, FP32, toy["point"]))
    assert len(recs) == 5 * 120
    for r in recs:
        if r.bitwise_constant:
            assert r.d_eff == 0.0 and r.regime is Regime.CONSTANT
    for label, _ in dirs:
        mine = [r for r in recs if r.direction_label == label]
        assert mine[0].bitwise_constant
        assert is_ordered_trichotomy([r.regime for r in mine])


def test_toy_sweep_rank_correlation_at_large_eps(toy):
    sp = toy["spectrum"]
    ks = [0, 15, 31, 63]
    recs = directional_sweep(toy["lm"], sp, SweepConfig([0.1], spectral(sp, ks), FP32, toy["point"]))
    assert spearmanr([r.d_eff for r in recs], sp.sigma[ks]).statistic > 0


def test_sweep_flags_non_finite_points():
    o = LinearOracle.from_spectrum(np.array([1e30, 1.0]), seed=0, precision=FP32)
    sp = oracle_spectrum(o)
    with np.errstate(all="ignore"):
        recs = directional_sweep(o, sp, SweepConfig([1e-3, 1e10], spectral(sp, [0]), FP32, np.zeros(2)))
    assert not recs[0].flagged
    assert recs[1].flagged and recs[1].regime is Regime.UNCLASSIFIED


# -- layer gains -------------------------------------------------------------------------


def test_oracle_layer_gain(oracle):
    o, sp = oracle
    g = layerwise_gain(o, sp, 1e-3, spectral(sp, [0, 5, 15]), np.zeros(16))
    assert g.gains.shape == (2, 3)
    assert np.allclose(g.gains[0], 1.0, rtol=1e-12)
    assert np.allclose(g.gains[1], sp.sigma[[0, 5, 15]], rtol=1e-9)


def test_constant_gain_column_is_zero(toy):
    g = layerwise_gain(toy["lm"], toy["spectrum"], 1e-13, spectral(toy["spectrum"], [0, 1]), toy["point"])
    assert np.all(g.bitwise_constant) and np.all(g.gains == 0)


def test_directional_collapse(toy):
    sp = toy["spectrum"]
    dirs = spectral(sp, [0, 63]) + random_directions(1, 64, 3)
    chaotic = layerwise_gain(toy["lm"], sp, 2e-9, dirs, toy["point"])
    signal = layerwise_gain(toy["lm"], sp, 0.1, dirs, toy["point"])
    assert not chaotic.bitwise_constant.any()

    def cv(x):
        return np.std(x) / np.mean(x)

    # in the avalanche regime gains no longer follow sigma_k (v_d would be ~1e-8)
    assert cv(chaotic.gains[-1]) < cv(signal.gains[-1])
    assert chaotic.gains[-1][1] > 1e3 * sp.sigma[0] * 1e-2


# -- instability / micro-continuity ------------------------------------------------------


def test_instability_arithmetic():
    ms = np.zeros((4, 3))
    ms[3, 0] = 1e-6
    eps = 1e-12 * np.arange(4)
    sw = summarize(ms, eps, np.ones(4))
    assert np.allclose(sw.inst, [0.0, 0.0, 1e6])
    assert sw.summary.median_inst == 0.0
    assert abs(sw.summary.mean_inst - 1e6 / 3) < 1e-3


def test_instability_constant_sequence(toy):
    sw = instability_sweep(toy["lm"], toy["point"], toy["spectrum"].direction(0), 1e-14 * np.arange(1, 6))
    assert sw.summary.mean_inst == sw.summary.median_inst == sw.summary.max_drift == 0.0
    assert sw.summary.min_margin == sw.summary.mean_margin


def test_instability_validation(toy):
    v = toy["spectrum"].direction(0)
    with pytest.raises(ValueError):
        instability_sweep(toy["lm"], toy["point"], v, [1e-3])
    with pytest.raises(ValueError):
        instability_sweep(toy["lm"], toy["point"], v, [1e-3, 1e-4])


def test_micro_continuity_partition(toy):
    sp = toy["spectrum"]
    v = sp.direction(0)
    b = boundary_search(toy["lm"], toy["point"], v[None])[0]
    st = micro_continuity(toy["lm"], toy["point"], v, b.s_max - 100e-13, 200, 1e-13)
    assert st.stall_count + st.jump_count == 200
    assert st.jump_count >= 1 and st.stall_count > 100
    flat = micro_continuity(toy["lm"], toy["point"], v, 1e-13, 20, 1e-13)
    assert flat.stall_count == 20 and np.all(flat.cumulative == 0)
    with pytest.raises(ValueError):
        micro_continuity(toy["lm"], toy["point"], v, 0.0, 10, 1e-3)


# -- boundaries ---------------------------------------------------------------------------


def test_identity_boundary_is_half_ulp():
    o = LinearOracle.identity(4, precision=FP32)
    x0 = np.ones(4)
    e = np.eye(4)
    res = angular_boundary(o, x0, e[0], e[1], n_angles=4)
    assert res[0].s_max == 2.0**-24 and res[0].status == "ok" and res[0].s_next_flips
    assert np.all(verify_boundaries(o, x0, [e[0], e[1], -e[0], -e[1]], res))


def test_boundary_contract_on_toy(toy):
    sp = toy["spectrum"]
    out = spectrum_boundary(toy["lm"], toy["point"], sp, [0, 31, 63])
    res = [r for *_, r in out]
    assert all(r.status == "ok" and r.s_next_flips and r.s_max > 0 for r in res)
    assert np.all(verify_boundaries(toy["lm"], toy["point"], np.stack([sp.direction(k) for k in (0, 31, 63)]), res))


def test_boundary_shrinks_below_s_init():
    o = LinearOracle.from_spectrum(np.array([1e3, 1.0]), seed=0, offset=np.ones(2))
    sp = oracle_spectrum(o)
    res = spectrum_boundary(o, np.zeros(2), sp, lattice=FP64)
    assert all(r.status == "ok" for *_, r in res)
    assert res[0][2].s_max < 1e-14
    ratio = res[1][2].s_max / res[0][2].s_max
    assert 1e3 / 4 <= ratio <= 1e3 * 4


def test_boundary_unbounded_and_unstable():
    o = LinearOracle.identity(2, precision=FP32)
    dirs = np.eye(2)
    big = boundary_search(o, np.array([1e30, 1e30]), dirs, s_cap=1.0)
    assert all(r.status == "unbounded" and r.s_max == 1.0 for r in big)
    tiny = boundary_search(o, np.zeros(2), dirs)
    assert all(r.status == "unstable" for r in tiny)


def test_boundary_budget_status(toy):
    res = boundary_search(toy["lm"], toy["point"], toy["spectrum"].direction(0)[None], max_bisect=2, max_refine=0)
    assert res[0].status == "budget"


def test_plane_must_be_orthogonal(toy):
    v = toy["spectrum"].direction(0)
    with pytest.raises(ValueError):
        angular_boundary(toy["lm"], toy["point"], v, v, n_angles=4)


def test_boundary_in_bf16_lattice():
    o = LinearOracle.identity(2, precision=PrecisionMode.BF16)
    res = boundary_search(o, np.ones(2), np.eye(2)[:1], lattice=PrecisionMode.BF16)
    assert res[0].s_max == 2.0**-8
    assert nextafter(res[0].s_max, "up", PrecisionMode.BF16) == np.float32(2.0**-8 + 2.0**-15)


# -- near ties and decision maps ----------------------------------------------------------


def test_metric_fixtures():
    assert tuple(vars(grid_metrics(np.zeros((5, 5), int))).values()) == (0.0, 1, 0.0)
    assert tuple(vars(grid_metrics(np.array([[0, 1], [1, 0]]))).values()) == (1.0, 4, 1.0)
    half = np.array([[0, 0, 1, 1]] * 4)
    assert tuple(vars(grid_metrics(half)).values()) == (1 / 6, 2, 0.5)


def test_metrics_pure_function_of_grid(rng):
    g = rng.integers(0, 3, (30, 30))
    a = DecisionMap.from_grid(g)
    assert 0 <= a.flip_frequency <= 1 and a.fragmentation >= 1
    b = DecisionMap.from_grid(g.copy())
    assert (a.flip_frequency, a.fragmentation, a.crossing_density) == (b.flip_frequency, b.fragmentation, b.crossing_density)


def tie_oracle():
    rng = np.random.default_rng(0)
    W = rng.standard_normal((5, 8))
    o = LinearOracle.from_spectrum(np.logspace(1, -1, 8), seed=2, unembedding=W)
    return o, rng.standard_normal(8)


def test_near_tie_on_oracle():
    o, x0 = tie_oracle()
    x = find_near_tie(o, x0, oracle_spectrum(o))
    z = o.local_map(x).evaluate(x[None])[1]
    assert logit_margin(z)[0] <= 1e-4
    assert find_near_tie(o, x, oracle_spectrum(o)) is x


def test_near_tie_unreachable():
    o, x0 = tie_oracle()
    z0 = o.local_map(x0).evaluate(x0[None])[1][0]
    t1, t2 = np.argsort(-z0)[:2]
    g = o.A.T @ (o.unembedding[t1] - o.unembedding[t2])
    v = np.random.default_rng(5).standard_normal(8)
    v -= g * (g @ v) / (g @ g)
    with pytest.raises(NoNearTie, match="no near-tie reachable"):
        find_near_tie(o, x0, direction=v / np.linalg.norm(v))


def test_decision_map_on_toy(toy):
    tie = find_near_tie(toy["lm"], toy["point"], toy["spectrum"], tol=1e-6)
    lt = toy["model"].local_map(tie)
    assert logit_margin(lt.evaluate(lt.x0[None])[1])[0] <= 1e-6
    sp = toy["spectrum"]
    dm = decision_map(lt, tie, sp.direction(0), sp.direction(1), eps_range=2e-9, step=2e-10)
    assert dm.grid.shape == (21, 21)
    assert dm.fragmentation > 1 and 0 < dm.flip_frequency <= 1
    assert set(np.unique(dm.grid)) <= {0, 1, 2}


def test_decision_map_far_from_tie_is_uniform(toy):
    sp = toy["spectrum"]
    dm = decision_map(toy["lm"], toy["point"], sp.direction(0), sp.direction(1), eps_range=1e-8, step=1e-9)
    assert (dm.flip_frequency, dm.fragmentation, dm.crossing_density) == (0.0, 1, 0.0)


# -- noise averaging ------------------------------------------------------------------------


def test_noise_average_on_oracle(oracle):
    o, sp = oracle
    for n in (1, 10, 100):
        for k in (0, 7, 15):
            kappa = noise_averaged_kappa(o, np.zeros(16), sp.direction(k), 1e-3, n)
            assert abs(kappa / sp.sigma[k] - 1) <= 1e-9


def test_noise_average_degenerates_to_d_eff(toy):
    sp = toy["spectrum"]
    v = sp.direction(0)
    for eps in (2e-9, 1e-3):
        rec = directional_sweep(toy["lm"], sp, SweepConfig([eps], [("v1", v)], FP32, toy["point"]))[0]
        kappa = noise_averaged_kappa(toy["lm"], toy["point"], v, eps, 1, noise_mag=0.0)
        assert np.float64(kappa).tobytes() == np.float64(rec.d_eff).tobytes()


def test_noise_average_is_seeded(toy):
    v = toy["spectrum"].direction(0)
    a = noise_averaged_kappa(toy["lm"], toy["point"], v, 2e-9, 10, seed=4)
    b = noise_averaged_kappa(toy["lm"], toy["point"], v, 2e-9, 10, seed=4)
    assert a == b
    with pytest.raises(ValueError):
        noise_averaged_kappa(toy["lm"], toy["point"], v, 2e-9, 0)
