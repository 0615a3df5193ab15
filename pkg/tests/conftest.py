import numpy as np
import pytest

from topodetect.prior import VariationalField
from topodetect.registration import RegistrationConfig

# filled by tests/test_acceptance.py, printed at the end of the session
ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def fast_cfg():
    return RegistrationConfig(iterations=80, pyramid_levels=2)


def random_q(rng, h, w, dims=2, spread=1.0):
    mu = spread * rng.standard_normal((dims, h, w))
    log_v = rng.uniform(-2.0, 1.0, size=(dims, h, w))
    return VariationalField(mu, log_v)


def smooth_texture(rng, size, sigma=1.5):
    from scipy import ndimage

    img = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="reflect")
    img = (img - img.min()) / (img.max() - img.min())
    return img[None]


def away_from_kinks(field, margin=1e-3):
    """Nudge displacements so no sample lies within ``margin`` of a cell boundary.

    Bilinear sampling is not differentiable at integer coordinates, where
    central differences straddle two cells.
    """
    from topodetect.grid import identity_grid

    field = np.array(field, dtype=np.float64)
    xs, ys = identity_grid(field.shape[1], field.shape[2])
    for d, base in enumerate((xs, ys)):
        pos = base + field[d]
        near = np.abs(pos - np.rint(pos)) < margin
        field[d][near] += 2 * margin
    return field
