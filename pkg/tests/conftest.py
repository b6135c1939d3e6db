import numpy as np
import pytest

from chaoscope.model import EmbeddingPoint, ModelConfig, build_model
from chaoscope.spectrum import model_spectrum

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def toy():
    """Default toy transformer (seed 1, FP32), its base point, local map and spectrum."""
    cfg = ModelConfig(seed=1)
    model = build_model(cfg)
    point = EmbeddingPoint.random(cfg, 0)
    lm = model.local_map(point)
    return {"cfg": cfg, "model": model, "point": point, "lm": lm, "spectrum": model_spectrum(model, point)}


@pytest.fixture(scope="session")
def small_toy():
    cfg = ModelConfig(d_model=16, n_layers=2, n_heads=2, vocab_size=32, seq_len=4, seed=3)
    model = build_model(cfg)
    point = EmbeddingPoint.random(cfg, 0)
    return {"cfg": cfg, "model": model, "point": point, "lm": model.local_map(point)}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
