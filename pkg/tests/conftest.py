import numpy as np
import pytest

from mixedqa.data import GenConfig, generate
from mixedqa.model import ModelConfig, ModelParams


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (x is perturbed in place and restored)."""
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def rel_err(a, b) -> float:
    """||a - b|| / (||a|| + ||b||), the usual gradient-check relative error."""
    a, b = np.ravel(a).astype(float), np.ravel(b).astype(float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


TINY_GEN = GenConfig(vocab_size=60, key_vocab_size=30, num_documents=40, paragraphs_per_doc=3,
                     min_tokens=6, max_tokens=10, questions_per_doc=2, signature_length=2,
                     fine_frac=0.25, coarse_frac=0.25, dev_frac=0.25, test_frac=0.25, seed=7)


@pytest.fixture(scope="session")
def tiny_bundle():
    return generate(TINY_GEN)


@pytest.fixture
def tiny_params():
    return ModelParams.init(ModelConfig(vocab_size=60, d_emb=4, d_hid=5, init_scale=0.5),
                            np.random.default_rng(3))


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
