import numpy as np
import pytest

from ebmkit.foe import FoeModel


def random_model(rng, n_filters=3, n_components=9, dc_free=True, nu=0.8, beta_scale=0.4):
    betas = beta_scale * rng.standard_normal((n_filters, 25))
    if dc_free:
        betas[:, 0] = 0.0
    weights = np.exp(rng.standard_normal((n_filters, n_components)))
    sigma2 = 2 * nu / (n_components - 1)
    return FoeModel(betas, weights, nu, sigma2, dc_free=dc_free)


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one PASS/FAIL line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
