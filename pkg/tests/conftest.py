import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_blob(rng, max_side=64):
    """Union of random discs and rectangles on a canvas up to ``max_side`` square."""
    h = int(rng.integers(4, max_side + 1))
    w = int(rng.integers(4, max_side + 1))
    yy, xx = np.mgrid[0:h, 0:w]
    bits = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(1, 5))):
        if rng.random() < 0.5:
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            r = rng.uniform(1, max(1.5, min(h, w) / 3))
            bits |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            y0, x0 = int(rng.integers(0, h)), int(rng.integers(0, w))
            bits[y0:y0 + int(rng.integers(1, h + 1)), x0:x0 + int(rng.integers(1, w + 1))] = True
    if not bits.any():
        bits[h // 2, w // 2] = True
    return bits
