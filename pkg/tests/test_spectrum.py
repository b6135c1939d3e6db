import numpy as np
import pytest

from chaoscope.model import LinearOracle, NumericalAbort, oracle_forward
from chaoscope.spectrum import (
    SvdNotConverged,
    fd_jacobian,
    load_spectrum,
    model_spectrum,
    oracle_spectrum,
    save_spectrum,
    spectrum_cache_key,
    svd,
)


def test_fd_jacobian_of_linear_map():
    o = LinearOracle.from_spectrum(np.logspace(1, -1, 6), seed=2)
    for step in (1e-6, 1e-4, 1e-3):
        J = fd_jacobian(lambda xs: oracle_forward(o, xs), np.ones(6), step)
        assert np.max(np.abs(J - o.A)) <= 1e-9 * np.max(np.abs(o.A))


def test_fd_jacobian_of_square():
    J = fd_jacobian(lambda xs: xs**2, np.array([1.0, 2.0]))
    assert np.allclose(J, np.diag([2.0, 4.0]), atol=1e-8)


def test_fd_jacobian_errors():
    with pytest.raises(ValueError):
        fd_jacobian(lambda xs: xs, np.ones(2), 0.0)
    with pytest.raises(NumericalAbort), np.errstate(all="ignore"):
        fd_jacobian(lambda xs: np.log(xs - 1.0), np.ones(2), 1e-3)


def test_svd_diagonal():
    r = svd(np.diag([3.0, 2.0, 1.0]))
    assert np.array_equal(r.sigma, [3.0, 2.0, 1.0])
    assert np.allclose(np.abs(r.v), np.eye(3))


def test_svd_sorts_and_signs():
    r = svd(np.diag([1.0, -5.0, 2.0]))
    assert np.allclose(r.sigma, [5.0, 2.0, 1.0])
    assert np.all(r.v[np.argmax(np.abs(r.v), axis=0), np.arange(3)] > 0)


def test_svd_rank_one():
    a, b = np.array([1.0, 2.0, -2.0]), np.array([3.0, 0.0, 4.0, 1.0])
    r = svd(np.outer(a, b))
    assert abs(r.sigma[0] - np.linalg.norm(a) * np.linalg.norm(b)) <= 1e-12 * r.sigma[0]
    assert np.all(r.sigma[1:] <= 1e-10 * r.sigma[0])


def test_svd_reconstruction_and_orthogonality(rng):
    J = rng.standard_normal((8, 8))
    r = svd(J)
    assert np.allclose(r.reconstruct(), J, atol=1e-12)
    assert np.allclose(r.v.T @ r.v, np.eye(8), atol=1e-12)
    assert np.allclose(np.linalg.norm(r.v, axis=0), 1.0, atol=1e-12)
    assert np.allclose(r.sigma, np.linalg.svd(J, compute_uv=False), rtol=1e-12)


def test_svd_transpose_swaps_factors(rng):
    J = rng.standard_normal((6, 6))
    a, b = svd(J), svd(J.T)
    assert np.allclose(a.sigma, b.sigma, rtol=1e-12)
    assert np.allclose(np.abs(a.u.T @ b.v), np.eye(6), atol=1e-8)


def test_svd_orthogonal_invariance(rng):
    J = rng.standard_normal((7, 7))
    w = rng.standard_normal(7)
    H = np.eye(7) - 2 * np.outer(w, w) / (w @ w)
    assert np.allclose(svd(H @ J).sigma, svd(J).sigma, rtol=1e-10)


def test_svd_rejects_bad_input():
    with pytest.raises(ValueError):
        svd(np.array([[np.nan]]))
    with pytest.raises(SvdNotConverged) as info:
        svd(np.random.default_rng(0).standard_normal((6, 6)), max_sweeps=1)
    assert info.value.residual > 0


def test_oracle_spectrum_is_exact():
    sigma = np.logspace(3, -3, 10)
    o = LinearOracle.from_spectrum(sigma, seed=4)
    r = oracle_spectrum(o)
    assert np.array_equal(r.sigma, sigma)
    J = fd_jacobian(lambda xs: oracle_forward(o, xs), np.zeros(10), 1e-3)
    assert np.allclose(svd(J).sigma, sigma, rtol=1e-6)


def test_toy_spectrum(toy):
    sp = toy["spectrum"]
    assert np.all(np.diff(sp.sigma) <= 0)
    assert 0 < sp.sigma[-1] and np.isfinite(sp.condition)
    assert np.allclose(sp.v.T @ sp.v, np.eye(sp.v.shape[1]), atol=1e-10)
    assert sp.spanning_indices(8) == [0, 9, 18, 27, 36, 45, 54, 63]


def test_spectrum_cache_roundtrip(tmp_path, small_toy):
    sp = model_spectrum(small_toy["model"], small_toy["point"])
    path = tmp_path / "s.npz"
    save_spectrum(sp, path)
    back = load_spectrum(path)
    assert np.array_equal(back.sigma, sp.sigma) and np.array_equal(back.v, sp.v)
    key = spectrum_cache_key(small_toy["model"], small_toy["point"], sp.fd_step)
    assert key == spectrum_cache_key(small_toy["model"], small_toy["point"], sp.fd_step)
    assert key != spectrum_cache_key(small_toy["model"], small_toy["point"], 2 * sp.fd_step)
