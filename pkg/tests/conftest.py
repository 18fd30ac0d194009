import numpy as np
import pytest

from autolink.config import TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def tiny_config():
    """A configuration small enough to train a few steps in well under a second."""
    return TrainConfig(image_size=16, n_keypoints=3, batch=2, iters=3, patch_px=4)


@pytest.fixture
def tiny_images(rng):
    return rng.integers(0, 256, size=(6, 3, 16, 16), dtype=np.uint8)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
