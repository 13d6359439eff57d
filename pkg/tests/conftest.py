import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def textured_image(shape, rng, n_rects=40, fine=0.08):
    """Piecewise-constant rectangles over smooth shading with mild fine
    texture, in [0, 1]. Stands in for a sharp photo; rectangle positions
    are random so the spectrum has no periodic comb."""
    h, w = shape
    img = np.full(shape, 0.5)
    for _ in range(n_rects):
        y0 = int(rng.integers(0, h - 4))
        x0 = int(rng.integers(0, w - 4))
        hh = int(rng.integers(4, max(5, h // 2)))
        ww = int(rng.integers(4, max(5, w // 2)))
        img[y0 : y0 + hh, x0 : x0 + ww] = rng.random()
    yy, xx = np.mgrid[0:h, 0:w]
    shading = 0.5 + 0.5 * np.sin(2 * np.pi * xx / w) * np.cos(2 * np.pi * yy / h)
    img = 0.75 * img + (0.25 - fine) * shading + fine * rng.random(shape)
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo)
