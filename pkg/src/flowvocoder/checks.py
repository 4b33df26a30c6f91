"""Self-check suite run by ``flowvocoder check``: fast invariants on a tiny model.

Every check compares the implementation against an independent route
(finite differences, dense Jacobians, exact identities), so a regression in
any primitive shows up as a failed line.
"""
import io
import time

import numpy as np
import torch

from . import flowstack, numcore
from .conditioning import mel_extract
from .config import Config
from .mixlogcdf import MixtureParams, coupling_inverse, mix_log_cdf
from .training import Checkpoint, nll_loss

TINY = dict(sample_rate=8000, squeeze_h=4, n_flows=2, n_mix=2, channels=4, n_layers=2,
            emb_dim=8, cond_channels=4, chunk_len=24, batch=2, seed=0)


def tiny_model(seed=0, head_std=0.3, **overrides):
    cfg = Config(**{**TINY, **overrides, "seed": seed})
    model = flowstack.FlowModel.build(cfg)
    if head_std:
        gen = torch.Generator().manual_seed(seed + 1)
        with torch.no_grad():
            for p in model.estimator.head.parameters():
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * head_std)
    return model


def _data(model, n, seed):
    x = np.random.default_rng(seed).standard_normal((n, model.config.chunk_len)) * 0.5
    mel = np.stack([mel_extract(row, model.config.sample_rate).frames for row in x])
    return x, mel


def check_identity_at_init():
    model = tiny_model(head_std=0.0)
    x, mel = _data(model, 2, 1)
    Z, logdet = flowstack.flow_reverse(torch.as_tensor(x), mel, model)
    same = torch.equal(Z, flowstack.squeeze(torch.as_tensor(x), model.squeeze_h))
    back = torch.equal(flowstack.flow_forward(Z, mel, model), torch.as_tensor(x))
    ok = same and back and torch.count_nonzero(logdet) == 0
    return bool(ok), f"Z == squeeze(x): {same}, logdet == 0: {bool(torch.count_nonzero(logdet) == 0)}"


def check_round_trip():
    model = tiny_model()
    x, mel = _data(model, 3, 2)
    x = torch.as_tensor(x)
    with torch.no_grad():
        Z, _ = flowstack.flow_reverse(x, mel, model)
    err = float((flowstack.flow_forward(Z, mel, model, tol=1e-10) - x).abs().max())
    return err <= 1e-6, f"max |x - f(g(x))| = {err:.2e} (limit 1e-6)"


def check_jacobian():
    worst = 0.0
    for seed in range(2):
        model = tiny_model(seed)
        x, mel = _data(model, 1, 10 + seed)
        x = x[0]

        def f(v):
            with torch.no_grad():
                return flowstack.flow_reverse(torch.as_tensor(v), mel, model)[0].reshape(-1).numpy()
        _, dense = np.linalg.slogdet(numcore.numerical_jacobian(f, x, eps=1e-6))
        with torch.no_grad():
            _, total = flowstack.flow_reverse(torch.as_tensor(x), mel, model)
        worst = max(worst, abs(float(total) - dense) / max(abs(dense), 1e-12))
    return worst <= 1e-4, f"rel. error vs dense Jacobian = {worst:.2e} (limit 1e-4)"


def check_gradient():
    model = tiny_model(seed=3, chunk_len=32)
    x, mel = _data(model, 1, 3)
    params = list(model.parameters())
    grads = numcore.backward(nll_loss(x, mel, model), params)
    with torch.no_grad():
        fd = numcore.finite_difference_grad(lambda: nll_loss(x, mel, model), params, eps=1e-5)
    worst = max(float(((g - f).abs() / f.abs().clamp(min=1.0)).max()) for g, f in zip(grads, fd))
    n = sum(p.numel() for p in params)
    return worst <= 1e-4, f"{n} parameters, worst rel. error = {worst:.2e} (limit 1e-4)"


def check_causality():
    model = tiny_model(seed=4, squeeze_h=8, chunk_len=64)
    gen = torch.Generator().manual_seed(4)
    X = torch.randn(1, 8, 8, generator=gen, dtype=torch.float64)
    cond = torch.randn(1, model.config.cond_channels, 8, 8, generator=gen, dtype=torch.float64)
    e = model.embeddings[0]
    with torch.no_grad():
        base = flowstack.estimator_forward(X, cond, e, model)
        leaks = 0
        for i in range(8):
            Y = X.clone()
            Y[:, i] += 1.0
            p = flowstack.estimator_forward(Y, cond, e, model)
            leaks += sum(not torch.equal(getattr(p, f)[:, :i + 1], getattr(base, f)[:, :i + 1])
                         for f in ("logits", "mu", "s", "a", "b"))
    x, mel = _data(model, 1, 5)
    with torch.no_grad():
        Z, _, batch = flowstack.flow_reverse(torch.as_tensor(x), mel, model, return_params=True)
    _, seq = flowstack.flow_forward(Z, mel, model, return_params=True)
    gap = max(float((getattr(a, f) - getattr(b, f)).abs().max())
              for a, b in zip(batch, seq) for f in ("logits", "mu", "s", "a", "b"))
    return leaks == 0 and gap <= 1e-10, f"rows leaking: {leaks}, sequential vs batch = {gap:.1e}"


def check_inversion():
    gen = torch.Generator().manual_seed(6)
    raw = torch.randn(2000, 2 + 3 * 4, generator=gen, dtype=torch.float64) * 2
    p = MixtureParams.from_raw(raw, 4, dim=1)
    u = torch.rand(2000, generator=gen, dtype=torch.float64) * (1 - 2e-6) + 1e-6
    z = torch.logit(u) * torch.exp(p.a) + p.b
    x = coupling_inverse(z, p, tol=1e-10)
    err = float((mix_log_cdf(x, p) - u).abs().max())
    return err <= 1e-10, f"max |CDF(x) - u| = {err:.1e} over 2000 draws (limit 1e-10)"


def check_checkpoint():
    model = tiny_model()
    blob = Checkpoint.capture(model, model.config).to_bytes()
    again = Checkpoint.from_bytes(blob)
    rebuilt = again.build_model()
    same = all(torch.equal(a, b) for a, b in zip(model.state_dict().values(),
                                                  rebuilt.state_dict().values()))
    return same and again.to_bytes() == blob, f"byte-identical: {again.to_bytes() == blob}, weights equal: {same}"


CHECKS = (
    ("identity at init", check_identity_at_init),
    ("round trip", check_round_trip),
    ("log-det vs dense Jacobian", check_jacobian),
    ("gradient vs finite differences", check_gradient),
    ("row causality", check_causality),
    ("CDF inversion residual", check_inversion),
    ("checkpoint round trip", check_checkpoint),
)


def run_checks(out=None):
    """Run every check, print one line each; True when all pass."""
    out = out or io.StringIO()
    passed = True
    for name, fn in CHECKS:
        tick = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed property, reported like one
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        ok = bool(ok)
        passed &= ok
        ms = 1000 * (time.perf_counter() - tick)
        print(f"{'PASS' if ok else 'FAIL'}  {name:<32} {detail}  [{ms:.0f} ms]", file=out, flush=True)
    print(f"{'all checks passed' if passed else 'some checks FAILED'}", file=out)
    return passed

