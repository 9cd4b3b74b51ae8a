import numpy as np
import pytest

from gmddf.gaussians import GaussianComponent, GaussianMixture


def random_spd(rng, dim, scale=1.0):
    a = rng.standard_normal((dim, dim))
    return scale * (a @ a.T + dim * np.eye(dim))


def random_mixture(rng, dim=2, n_components=3, mean_scale=4.0, cov_scale=0.5):
    comps = []
    w = rng.uniform(0.2, 1.0, size=n_components)
    w /= w.sum()
    for q in range(n_components):
        comps.append(
            GaussianComponent(
                w[q],
                rng.uniform(-mean_scale, mean_scale, size=dim),
                random_spd(rng, dim, cov_scale),
            )
        )
    return GaussianMixture(comps)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Collected by the acceptance module's reporting hook (see test_acceptance.py).
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(line)
