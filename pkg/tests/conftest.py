"""Shared fixtures: scripts/ on the import path, 64-bit mode, small backbones."""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent / "scripts"))

import numerics as nx  # noqa: E402
from backbone import TinyTransformer, build_counter_backbone  # noqa: E402
from config import CounterConfig, TransformerConfig  # noqa: E402


@pytest.fixture
def float64():
    with nx.precision(np.float64):
        yield


@pytest.fixture
def counter6():
    """L=6 counter model, roles NFRFFF."""
    return build_counter_backbone(CounterConfig(num_layers=6, hidden_dim=16), seed=3)


@pytest.fixture
def counter8():
    """L=8 counter model, roles NNFRRFFF."""
    return build_counter_backbone(CounterConfig(num_layers=8, hidden_dim=32), seed=3)


@pytest.fixture
def tiny_config():
    return TransformerConfig(num_layers=2, hidden_dim=8, heads=2, ffn_dim=16, max_seq_len=32)


@pytest.fixture
def tiny_model(tiny_config):
    return TinyTransformer(tiny_config, seed=5)
