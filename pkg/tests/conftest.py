"""测试共享夹具"""
import logging

import numpy as np
import pytest

from geometry import CameraIntrinsics


@pytest.fixture(autouse=True)
def _quiet_logging(caplog):
    caplog.set_level(logging.WARNING)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def k100() -> CameraIntrinsics:
    """fx=fy=100, cx=cy=50, 100x100"""
    return CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)
