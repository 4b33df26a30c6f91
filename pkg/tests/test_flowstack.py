import math

import numpy as np
import pytest
import torch

from flowvocoder import numcore
from flowvocoder.errors import ConfigurationError, InputError
from flowvocoder.flowstack import (
    HALF_LOG_2PI, FlowModel, estimator_forward, flow_forward, flow_reverse, log_likelihood,
    squeeze, unsqueeze)

from conftest import mel_for, randomize_head, tiny_config


def dense_logdet(model, x, mel):
    """log|det| of the x -> Z map from a central-difference Jacobian (independent of the flow's logdet)."""
    def f(v):
        with torch.no_grad():
            Z, _ = flow_reverse(torch.as_tensor(v), mel, model)
        return Z.reshape(-1).numpy()
    J = numcore.numerical_jacobian(f, x, eps=1e-6)
    sign, logabs = np.linalg.slogdet(J)
    assert sign != 0
    return logabs


@pytest.mark.parametrize("H", [1, 2, 4, 8, 16])
def test_squeeze_round_trip_bit_exact(rng, H):
    x = torch.as_tensor(rng.standard_normal(160))
    assert torch.equal(unsqueeze(squeeze(x, H)), x)


def test_squeeze_layout():
    x = torch.arange(160.0)
    X = squeeze(x, 16)
    assert X.shape == (16, 10)
    assert X[3, 2] == 2 * 16 + 3
    assert torch.equal(squeeze(x, 1)[0], x)
    with pytest.raises(InputError):
        squeeze(torch.zeros(10), 4)


def test_zero_head_gives_identity_params():
    cfg = tiny_config()
    model = FlowModel.build(cfg)
    X = torch.randn(2, 4, 6, dtype=torch.float64)
    cond = torch.randn(2, cfg.cond_channels, 4, 6, dtype=torch.float64)
    p = estimator_forward(X, cond, model.embeddings[0], model)
    for field in (p.a, p.b, p.mu, p.s, p.logits):
        assert torch.count_nonzero(field) == 0


def test_shared_estimator_is_single_weight_set():
    model = FlowModel.build(tiny_config(n_flows=5))
    names = [n for n, _ in model.named_parameters()]
    assert model.embeddings.shape == (5, 8)
    assert sum(n.startswith("estimator.head.") for n in names) == 2
    assert model.estimator.head.out_channels == 2 + 3 * 2


def test_estimator_strict_row_causality(rng):
    cfg = tiny_config(squeeze_h=8, channels=6, n_layers=3)
    model = randomize_head(FlowModel.build(cfg), std=0.5, seed=3)
    X = torch.as_tensor(rng.standard_normal((1, 8, 8)))
    cond = torch.as_tensor(rng.standard_normal((1, cfg.cond_channels, 8, 8)))
    base = estimator_forward(X, cond, model.embeddings[1], model)
    for i in range(8):
        Y = X.clone()
        Y[:, i] += torch.as_tensor(rng.standard_normal(8))
        p = estimator_forward(Y, cond, model.embeddings[1], model)
        for field, ref in zip((p.a, p.b, p.mu), (base.a, base.b, base.mu)):
            assert torch.equal(field[:, :i + 1], ref[:, :i + 1])
            if i < 7:
                assert not torch.equal(field[:, i + 1:], ref[:, i + 1:])


def test_embedding_changes_params_after_one_step(rng):
    cfg = tiny_config()
    model = FlowModel.build(cfg)
    x = torch.as_tensor(rng.standard_normal((2, 24)) * 0.5)
    mel = mel_for(x, cfg)
    loss = -log_likelihood(x, mel, model).mean()
    params = list(model.parameters())
    for p, g in zip(params, numcore.backward(loss, params)):
        p.data -= 1e-2 * g
    X = squeeze(x, 4)
    cond = model.conditioner(torch.as_tensor(mel), 24)
    p0 = estimator_forward(X, cond, model.embeddings[0], model)
    p1 = estimator_forward(X, cond, model.embeddings[1], model)
    assert not torch.equal(p0.b, p1.b)


def test_identity_at_init(rng):
    cfg = tiny_config()
    model = FlowModel.build(cfg)
    x = torch.as_tensor(rng.standard_normal((3, 24)))
    mel = mel_for(x, cfg)
    Z, logdet = flow_reverse(x, mel, model)
    assert torch.equal(Z, squeeze(x, 4))
    assert torch.count_nonzero(logdet) == 0
    assert torch.equal(flow_forward(Z, mel, model), x)


def test_identity_at_init_odd_flow_count(rng):
    cfg = tiny_config(n_flows=3)
    model = FlowModel.build(cfg)
    x = torch.as_tensor(rng.standard_normal((1, 24)))
    Z, _ = flow_reverse(x, mel_for(x, cfg), model)
    assert torch.equal(Z, squeeze(x, 4))


def test_log_likelihood_zero_model_zero_chunk():
    cfg = tiny_config()
    model = FlowModel.build(cfg)
    x = torch.zeros(1, 24, dtype=torch.float64)
    ll = log_likelihood(x, mel_for(x, cfg), model)
    assert ll.item() == pytest.approx(-24 * math.log(2 * math.pi) / 2, abs=1e-12)


@pytest.mark.parametrize("seed", [0, 1])
def test_logdet_matches_dense_jacobian(rng, seed):
    cfg = tiny_config(seed=seed)
    model = randomize_head(FlowModel.build(cfg), seed=seed)
    x = rng.standard_normal(24) * 0.5
    mel = mel_for(x, cfg)
    _, total = flow_reverse(torch.as_tensor(x), mel, model)
    expected = dense_logdet(model, x, mel)
    assert abs(float(total) - expected) / abs(expected) <= 1e-4


def test_log_likelihood_matches_change_of_variables(rng, tiny_model):
    cfg = tiny_model.config
    x = rng.standard_normal(24) * 0.5
    mel = mel_for(x, cfg)
    with torch.no_grad():
        Z, _ = flow_reverse(torch.as_tensor(x), mel, tiny_model)
    direct = dense_logdet(tiny_model, x, mel) + float((-0.5 * Z ** 2 - HALF_LOG_2PI).sum())
    ll = float(log_likelihood(torch.as_tensor(x), mel, tiny_model))
    assert abs(ll - direct) / abs(direct) <= 1e-4
    assert ll == float(log_likelihood(torch.as_tensor(x), mel, tiny_model))


def test_round_trip_random_weights(rng, tiny_model):
    x = torch.as_tensor(rng.standard_normal((3, 24)) * 0.5)
    mel = mel_for(x, tiny_model.config)
    with torch.no_grad():
        Z, _ = flow_reverse(x, mel, tiny_model)
    x_back = flow_forward(Z, mel, tiny_model, tol=1e-10)
    assert (x_back - x).abs().max() <= 1e-6
    # and the other way round
    Z2 = torch.as_tensor(rng.standard_normal((3, 4, 6)))
    with torch.no_grad():
        Z_back, _ = flow_reverse(flow_forward(Z2, mel, tiny_model), mel, tiny_model)
    assert (Z_back - Z2).abs().max() <= 1e-6


def test_sequential_params_equal_batch_params(rng, tiny_model):
    x = torch.as_tensor(rng.standard_normal((2, 24)) * 0.5)
    mel = mel_for(x, tiny_model.config)
    with torch.no_grad():
        Z, _, batch = flow_reverse(x, mel, tiny_model, return_params=True)
    _, sequential = flow_forward(Z, mel, tiny_model, return_params=True)
    for pb, ps in zip(batch, sequential):
        for f in ("logits", "mu", "s", "a", "b"):
            assert (getattr(pb, f) - getattr(ps, f)).abs().max() <= 1e-10


def test_flow_forward_deterministic(rng, tiny_model):
    Z = torch.as_tensor(rng.standard_normal((4, 6)))
    mel = np.zeros((80, 1))
    assert torch.equal(flow_forward(Z, mel, tiny_model), flow_forward(Z, mel, tiny_model))


def test_flow_forward_rejects_wrong_height(tiny_model):
    with pytest.raises(ConfigurationError):
        flow_forward(torch.zeros(5, 6, dtype=torch.float64), np.zeros((80, 1)), tiny_model)


def test_gradient_step_increases_likelihood(rng, tiny_model):
    x = torch.as_tensor(rng.standard_normal((2, 24)) * 0.5)
    mel = mel_for(x, tiny_model.config)
    before = log_likelihood(x, mel, tiny_model).sum()
    params = list(tiny_model.parameters())
    grads = numcore.backward(-before, params)
    with torch.no_grad():
        for p, g in zip(params, grads):
            p -= 1e-4 * g
        after = log_likelihood(x, mel, tiny_model).sum()
    assert after > before
