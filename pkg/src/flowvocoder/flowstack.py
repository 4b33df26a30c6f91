"""K mixture-CDF coupling blocks sharing one row-autoregressive estimator.

A waveform chunk of ``n`` samples is squeezed to an ``H x (n / H)`` grid.
Each block transforms every row with parameters predicted from the rows
above it (plus the mel conditioner and the block's embedding); rows are
reversed after every block so every row eventually sees context (and
restored to natural order at the end when K is odd).
"""
import math
import time

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import numcore
from .conditioning import Upsampler, upsample
from .config import Config
from .errors import ConfigurationError, InputError, NumericFailure
from .mixlogcdf import MixtureParams, coupling_forward, coupling_inverse

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def squeeze(x, H):
    """Interleave the last axis into ``(H, n // H)`` so that ``X[i, j] = x[j * H + i]``."""
    n = x.shape[-1]
    if n % H:
        raise InputError(f"chunk length {n} is not divisible by H={H}")
    return x.reshape(*x.shape[:-1], n // H, H).swapaxes(-1, -2)


def unsqueeze(X):
    """Inverse of :func:`squeeze`."""
    H, w = X.shape[-2:]
    return X.swapaxes(-1, -2).reshape(*X.shape[:-2], H * w)


def width_dilation(layer):
    return 2 ** (layer % 4)


class _ResidualLayer(nn.Module):
    def __init__(self, channels, cond_channels, emb_dim, dilation):
        super().__init__()
        self.dilation = (1, dilation)
        self.pre = nn.Conv2d(channels, channels, 1)
        self.gate = nn.Conv2d(channels, 2 * channels, 3)
        self.cond = nn.Conv2d(cond_channels, 2 * channels, 1)
        self.emb = nn.Linear(emb_dim, 2 * channels)
        self.out = nn.Conv2d(channels, channels, 1)

    def forward(self, h, cond, e_k):
        t = numcore.conv2d(h, self.pre.weight, self.pre.bias)
        pre = numcore.conv2d(t, self.gate.weight, self.gate.bias,
                             dilation=self.dilation, causal="nonstrict")
        pre = pre + numcore.conv2d(cond, self.cond.weight, self.cond.bias)
        pre = pre + self.emb(e_k)[:, None, None]
        g = numcore.gated_activation(pre)
        return h + numcore.conv2d(g, self.out.weight, self.out.bias)


class SharedEstimator(nn.Module):
    """Predicts coupling parameters for every grid element.

    Input rows are shifted down by one before the first convolution and
    all 3x3 convolutions are causal over rows, so the parameters of row
    ``i`` depend on rows ``< i`` only. The output head is zero-initialised,
    which makes every block the identity map at construction.
    """

    def __init__(self, n_mix=4, channels=32, n_layers=4, emb_dim=64, cond_channels=32):
        super().__init__()
        self.n_mix = n_mix
        self.inp = nn.Conv2d(1, channels, 1)
        self.layers = nn.ModuleList(
            _ResidualLayer(channels, cond_channels, emb_dim, width_dilation(i))
            for i in range(n_layers))
        self.head = nn.Conv2d(channels, 2 + 3 * n_mix, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, X, cond, e_k):
        """``X`` is ``(B, h, w)``, ``cond`` ``(B, c, h, w)``; returns :class:`MixtureParams`."""
        if cond.shape[0] != X.shape[0] or cond.shape[-2:] != X.shape[-2:]:
            raise ConfigurationError(
                f"conditioner shape {tuple(cond.shape)} does not match grid {tuple(X.shape)}")
        context = F.pad(X, (0, 0, 1, 0))[:, :-1].unsqueeze(1)
        h = numcore.conv2d(context, self.inp.weight, self.inp.bias)
        for layer in self.layers:
            h = layer(h, cond, e_k)
        raw = numcore.conv2d(h, self.head.weight, self.head.bias)
        return MixtureParams.from_raw(raw, self.n_mix, dim=1)


class FlowModel(nn.Module):
    """Upsampler, shared estimator and one embedding per flow block."""

    def __init__(self, config=None):
        super().__init__()
        config = config or Config()
        self.config = config
        self.upsampler = Upsampler(config.n_mels, config.cond_channels)
        self.estimator = SharedEstimator(config.n_mix, config.channels, config.n_layers,
                                         config.emb_dim, config.cond_channels)
        self.embeddings = nn.Parameter(torch.randn(config.n_flows, config.emb_dim))

    @classmethod
    def build(cls, config=None, seed=None, dtype=numcore.DEFAULT_DTYPE):
        """Construct with weights drawn from a private, seeded RNG stream."""
        config = config or Config()
        seed = config.seed if seed is None else seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            model = cls(config)
        return model.to(dtype)

    @property
    def dtype(self):
        return self.embeddings.dtype

    @property
    def n_flows(self):
        return self.embeddings.shape[0]

    @property
    def squeeze_h(self):
        return self.config.squeeze_h

    def conditioner(self, mel, n):
        """Squeezed per-sample conditioner ``(B, c, H, n / H)`` for ``n``-sample chunks."""
        cond = upsample(mel, self.upsampler, n)
        if cond.dim() == 2:
            cond = cond.unsqueeze(0)
        return squeeze(cond, self.squeeze_h)


def _as_batch(x, model):
    x = torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x, dtype=model.dtype)
    return x.unsqueeze(0) if x.dim() == 1 else x


def _as_mel_batch(mel, model):
    mel = torch.as_tensor(np.asarray(mel) if not torch.is_tensor(mel) else mel, dtype=model.dtype)
    return mel.unsqueeze(0) if mel.dim() == 2 else mel


def _block_cond(cond, k):
    # block k sees rows reversed k times
    return cond.flip(-2) if k % 2 else cond


def estimator_forward(X, cond, e_k, model):
    """Row parameters for a whole squeezed grid in one pass."""
    return model.estimator(X, cond, e_k)


def reverse_squeezed(X, cond, model, mask=None, return_params=False):
    """Data grid -> latent grid. Returns ``(Z, logdet per item, mask, params)``.

    ``mask`` (same shape as ``X``) excludes padded elements from the logdet
    and is returned in the latent grid's row order.
    """
    total = X.new_zeros(X.shape[0])
    params = []
    K = model.n_flows
    for k in range(K):
        p = estimator_forward(X, _block_cond(cond, k), model.embeddings[k], model)
        if return_params:
            params.append(p)
        X, logdet = coupling_forward(X, p)
        bad = ~(torch.isfinite(X) & torch.isfinite(logdet)).flatten(1).all(1)
        if bad.any():
            raise NumericFailure(f"non-finite output of flow {k}",
                                 where=f"batch item {int(bad.nonzero()[0])}")
        if mask is not None:
            logdet = logdet * mask
        total = total + logdet.sum((-2, -1))
        X = X.flip(-2)
        if mask is not None:
            mask = mask.flip(-2)
    if K % 2:
        X = X.flip(-2)
        if mask is not None:
            mask = mask.flip(-2)
    return X, total, mask, params


def forward_squeezed(Z, cond, model, tol=1e-10, return_params=False, timings=None):
    """Latent grid -> data grid, generating rows in order within each block.

    ``timings``, if given, accumulates seconds under ``"estimator"`` and
    ``"inversion"``.
    """
    K = model.n_flows
    params = []
    with torch.no_grad():
        X = Z.flip(-2) if K % 2 else Z
        for k in reversed(range(K)):
            X = X.flip(-2)
            X, block_params = _invert_block(X, _block_cond(cond, k), k, model, tol, timings)
            if return_params:
                params.insert(0, block_params)
    return X, params


def _invert_block(Zk, cond, k, model, tol, timings=None):
    timings = {} if timings is None else timings
    e_k = model.embeddings[k]
    out = torch.zeros_like(Zk)
    rows = []
    for i in range(Zk.shape[-2]):
        # causality lets us drop every row below i
        tick = time.perf_counter()
        p = estimator_forward(out[:, :i + 1], cond[..., :i + 1, :], e_k, model)
        p_row = p.map(lambda t: t[:, i])
        rows.append(p_row)
        tock = time.perf_counter()
        try:
            out[:, i] = coupling_inverse(Zk[:, i], p_row, tol=tol)
        except NumericFailure as exc:
            raise NumericFailure(str(exc), where=f"flow {k}, row {i}: {exc.where}") from exc
        timings["estimator"] = timings.get("estimator", 0.0) + tock - tick
        timings["inversion"] = timings.get("inversion", 0.0) + time.perf_counter() - tock
    stacked = MixtureParams(*(torch.stack(per_row, dim=1) for per_row in
                              zip(*((r.logits, r.mu, r.s, r.a, r.b) for r in rows))))
    return out, stacked


def flow_reverse(x, mel, model, return_params=False):
    """Waveform chunk(s) -> ``(Z, total_logdet)``; batched over a leading axis."""
    x = _as_batch(x, model)
    cond = model.conditioner(_as_mel_batch(mel, model), x.shape[-1])
    Z, total, _, params = reverse_squeezed(squeeze(x, model.squeeze_h), cond, model,
                                           return_params=return_params)
    if return_params:
        return Z, total, params
    return Z, total


def flow_forward(Z, mel, model, tol=1e-10, return_params=False, timings=None):
    """Latent grid(s) -> waveform chunk(s).

    ``timings`` (a dict) collects per-stage seconds: upsample, estimator, inversion.
    """
    Z = torch.as_tensor(Z, dtype=model.dtype)
    single = Z.dim() == 2
    if single:
        Z = Z.unsqueeze(0)
    if Z.shape[-2] != model.squeeze_h:
        raise ConfigurationError(f"latent has {Z.shape[-2]} rows, model squeezes to {model.squeeze_h}")
    tick = time.perf_counter()
    with torch.no_grad():
        cond = model.conditioner(_as_mel_batch(mel, model), Z.shape[-2] * Z.shape[-1])
        if timings is not None:
            timings["upsample"] = timings.get("upsample", 0.0) + time.perf_counter() - tick
        X, params = forward_squeezed(Z, cond, model, tol, return_params, timings)
    x = unsqueeze(X)
    x = x[0] if single else x
    return (x, params) if return_params else x


def gaussian_log_density(Z):
    return -0.5 * Z ** 2 - HALF_LOG_2PI


def log_likelihood(x, mel, model):
    """Exact total log-likelihood (nats) of each chunk under the flow."""
    Z, total = flow_reverse(x, mel, model)
    return total + gaussian_log_density(Z).sum((-2, -1))
