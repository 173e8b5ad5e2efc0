"""Shared fixtures: small cameras, poses and synthetic scenes."""
import pytest
import torch

from geometry import DTYPE, Intrinsics, PoseSE3
from synthdata import generate_scene


@pytest.fixture
def identity_pose() -> PoseSE3:
    return PoseSE3.identity()


@pytest.fixture
def intr64() -> Intrinsics:
    """fx=fy=100 with the principal point at the centre of a 64×64 image."""
    return Intrinsics(100.0, 100.0, 32.0, 32.0, 64, 64)


@pytest.fixture
def generator() -> torch.Generator:
    return torch.Generator().manual_seed(1234)


@pytest.fixture(scope="session")
def small_scene():
    """Two views, three frames at 16×16 with one vehicle."""
    return generate_scene(7, V=2, T=3, H=16, W=16, n_static=300, n_dynamic=1)


@pytest.fixture(scope="session")
def static_scene():
    return generate_scene(3, V=1, T=2, H=16, W=16, n_static=200, n_dynamic=0)


def vec(*values) -> torch.Tensor:
    return torch.tensor(values, dtype=DTYPE)
