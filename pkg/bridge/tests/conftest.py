"""Fixtures for the bridge test suite."""

import numpy as np
import pytest

from bridge_helpers import IDENTITY_NORM, RawPeer, bridge_argv, write_flat_linear


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def toy_peer(tmp_path):
    """Zero-bias 6-way linear scorer on 8x8 RGB with identity normalization."""
    path = tmp_path / "toy.pt"
    model = write_flat_linear(path, 6, 8, 3, seed=11)
    peer = RawPeer(bridge_argv(path, *IDENTITY_NORM))
    yield peer, model
    peer.close()
