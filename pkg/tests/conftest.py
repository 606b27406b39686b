"""Shared fixtures: small optical configurations reused across modules.

Session scope keeps the rendered dictionaries cached; tests must not
mutate them (slices are read-only arrays).
"""

import numpy as np
import pytest

from rpsfloc.optics import OpticalConfig, build_dictionary


@pytest.fixture(scope="session")
def small_config():
    """32 x 32 image, 5 planes, 3 zones: fast but fully representative."""
    return OpticalConfig(
        num_zones=3,
        num_planes=5,
        image_shape=(32, 32),
        pixel_pitch=0.5,
        pupil_samples=64,
    )


@pytest.fixture(scope="session")
def small_dictionary(small_config):
    return build_dictionary(small_config)


@pytest.fixture(scope="session")
def rect_dictionary():
    """Non-square image to catch H/W transpositions."""
    config = OpticalConfig(
        num_zones=2,
        num_planes=3,
        image_shape=(20, 28),
        pixel_pitch=0.5,
        pupil_samples=64,
    )
    return build_dictionary(config)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
