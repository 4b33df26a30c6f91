import numpy as np
import pytest
import torch

from flowvocoder.conditioning import mel_extract
from flowvocoder.config import Config
from flowvocoder.flowstack import FlowModel


def tiny_config(**overrides):
    """K=2, H=4, M=2, C=4 model used for dense-Jacobian and gradient oracles."""
    values = dict(sample_rate=8000, squeeze_h=4, n_flows=2, n_mix=2, channels=4, n_layers=2,
                  emb_dim=8, cond_channels=4, chunk_len=24, batch=2, seed=0)
    values.update(overrides)
    return Config(**values)


def randomize_head(model, std=0.3, seed=0):
    """Give the zero-initialised output head random weights."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.estimator.head.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)
    return model


def mel_for(x, config):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return np.stack([mel_extract(row, config.sample_rate).frames for row in x])


@pytest.fixture
def tiny_model():
    return randomize_head(FlowModel.build(tiny_config()), seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance line (printed at session end)."""
    def record(number, ok, detail):
        ACCEPTANCE[number] = (bool(ok), detail)
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
