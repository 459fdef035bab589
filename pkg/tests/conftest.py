import numpy as np
import pytest
from scipy import ndimage

from regcd.raster import Raster

_ACCEPTANCE = []


def textured(width=96, height=96, seed=0, channels=1, sigma=1.5):
    """Smooth random texture with plenty of corners."""
    rng = np.random.default_rng(seed)
    planes = []
    for _ in range(channels):
        a = ndimage.gaussian_filter(rng.standard_normal((height, width)), sigma)
        a = (a - a.min()) / (a.max() - a.min())
        planes.append(np.rint(20 + 215 * a))
    return Raster(np.stack(planes, axis=-1).astype(np.uint8))


def smooth_image(width=64, height=64):
    """Very smooth test pattern (low spatial frequency)."""
    yy, xx = np.mgrid[0:height, 0:width]
    a = 128 + 60 * np.sin(xx / 9.0) * np.cos(yy / 11.0) + 0.5 * xx
    return Raster(np.clip(np.rint(a), 0, 255).astype(np.uint8))


@pytest.fixture
def texture():
    return textured()


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    def record(tag, ok, detail):
        _ACCEPTANCE.append((tag, bool(ok), detail))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for tag, ok, detail in sorted(_ACCEPTANCE, key=lambda r: int(r[0].split()[0].lstrip("AC"))):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {tag}: {detail}")
