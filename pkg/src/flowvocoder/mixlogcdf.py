"""Element-wise mixture-of-logistics CDF coupling transform.

The forward direction (data -> latent) is

    tau = sum_m pi_m * sigmoid((x - mu_m) * exp(-s_m))
    z   = logit(tau) * exp(a) + b

and its inverse has no closed form, so it is found by bracketed bisection
on the monotone CDF. Every function broadcasts over leading axes; mixture
components live on the last axis of ``logits``, ``mu`` and ``s``.
"""
import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import InputError, NumericFailure

log = logging.getLogger(__name__)

A_MAX = 5.0
S_MAX = 7.0
EPS_CDF = 1e-12
LOG_EPS_CDF = math.log(EPS_CDF)
MAX_BRACKET_WIDTH = 1e6

_clamp_logged = False


def soft_clamp(value, bound):
    """Smoothly squash ``value`` into ``(-bound, bound)``; identity near 0."""
    return bound * torch.tanh(value / bound)


@dataclass(frozen=True)
class MixtureParams:
    """Per-element coupling parameters.

    ``logits``, ``mu`` and ``s`` have shape ``(..., M)``; ``a`` and ``b``
    have shape ``(...)``. ``s`` is a log-scale and ``a`` the log of the
    affine post-scale. Weights are kept as logits and normalised on use.
    """

    logits: torch.Tensor
    mu: torch.Tensor
    s: torch.Tensor
    a: torch.Tensor
    b: torch.Tensor

    @property
    def n_mix(self):
        return self.mu.shape[-1]

    @property
    def log_pi(self):
        return F.log_softmax(self.logits, dim=-1)

    @property
    def pi(self):
        return torch.softmax(self.logits, dim=-1)

    @classmethod
    def from_weights(cls, pi, mu, s, a=0.0, b=0.0, dtype=torch.float64):
        """Build from explicit mixture weights (convenient for scalar use)."""
        t = lambda v: torch.as_tensor(v, dtype=dtype)
        pi = t(pi)
        if (pi <= 0).any():
            raise InputError("mixture weights must be positive")
        return cls(torch.log(pi / pi.sum(-1, keepdim=True)), t(mu), t(s), t(a), t(b))

    @classmethod
    def identity(cls, n_mix, shape=(), dtype=torch.float64):
        zeros = torch.zeros(*shape, n_mix, dtype=dtype)
        return cls(zeros, zeros, zeros, zeros[..., 0], zeros[..., 0])

    @classmethod
    def from_raw(cls, raw, n_mix, dim=1):
        """Split an unconstrained network output with ``2 + 3M`` entries on ``dim``.

        Order along ``dim``: a, b, M logits, M locations, M log-scales.
        ``a`` and ``s`` get soft clamps so exp(+-a), exp(+-s) stay bounded.
        """
        if raw.shape[dim] != 2 + 3 * n_mix:
            raise InputError(f"expected {2 + 3 * n_mix} parameter channels, got {raw.shape[dim]}")
        raw = raw.movedim(dim, -1)
        a, b = raw[..., 0], raw[..., 1]
        logits, mu, s = raw[..., 2:].split(n_mix, dim=-1)
        return cls(logits, mu, soft_clamp(s, S_MAX), soft_clamp(a, A_MAX), b)

    def map(self, fn):
        """Apply ``fn`` to the leading (non-mixture) axes of every field."""
        return MixtureParams(fn(self.logits), fn(self.mu), fn(self.s), fn(self.a), fn(self.b))

    def collapsed(self):
        """Mask of elements whose components all coincide (a single logistic)."""
        return ((self.mu.amax(-1) == self.mu.amin(-1))
                & (self.s.amax(-1) == self.s.amin(-1)))


def _as_input(x, p):
    x = torch.as_tensor(x, dtype=p.mu.dtype)
    if not torch.isfinite(x).all():
        raise InputError("x must be finite")
    return x


def _standardize(x, p):
    return (x.unsqueeze(-1) - p.mu) * torch.exp(-p.s)


def _log_cdf_pair(x, p):
    """``(log tau, log(1 - tau))`` computed without forming tau."""
    global _clamp_logged
    u = _standardize(x, p)
    log_pi = p.log_pi
    log_tau = torch.logsumexp(log_pi + F.logsigmoid(u), dim=-1)
    log_1m_tau = torch.logsumexp(log_pi + F.logsigmoid(-u), dim=-1)
    bad = ~(torch.isfinite(log_tau) & torch.isfinite(log_1m_tau))
    if bad.any():
        if not _clamp_logged:
            log.warning("mixture CDF hit 0 or 1; clamping to [%g, 1 - %g]", EPS_CDF, EPS_CDF)
            _clamp_logged = True
        log_tau = torch.where(torch.isfinite(log_tau), log_tau,
                              torch.full_like(log_tau, LOG_EPS_CDF)).clamp(max=math.log1p(-EPS_CDF))
        log_1m_tau = torch.where(torch.isfinite(log_1m_tau), log_1m_tau,
                                 torch.full_like(log_1m_tau, LOG_EPS_CDF)).clamp(max=math.log1p(-EPS_CDF))
    return log_tau, log_1m_tau


def mix_log_cdf(x, p):
    """Mixture-of-logistics CDF at ``x``; strictly increasing, values in (0, 1)."""
    x = _as_input(x, p)
    return torch.exp(_log_cdf_pair(x, p)[0])


def mix_log_pdf(x, p):
    """Log density of the logistic mixture at ``x`` (log-sum-exp over components)."""
    x = _as_input(x, p)
    u = _standardize(x, p)
    return torch.logsumexp(p.log_pi - p.s + u - 2 * F.softplus(u), dim=-1)


def _collapsed_loc_scale(p):
    # weighted means carry the correct first derivatives w.r.t. every component
    pi = p.pi
    return (pi * p.mu).sum(-1), (pi * p.s).sum(-1)


def coupling_forward(x, p):
    """Map data ``x`` to latent ``z``; returns ``(z, log|dz/dx|)``."""
    x = _as_input(x, p)
    log_tau, log_1m_tau = _log_cdf_pair(x, p)
    ea = torch.exp(p.a)
    z = (log_tau - log_1m_tau) * ea + p.b
    logdet = p.a + mix_log_pdf(x, p) - log_tau - log_1m_tau
    collapsed = p.collapsed()
    if collapsed.any():
        # logit(sigmoid(u)) == u; evaluating it analytically keeps identity exact
        loc, scale = _collapsed_loc_scale(p)
        z = torch.where(collapsed, (x - loc) * torch.exp(-scale) * ea + p.b, z)
        logdet = torch.where(collapsed, p.a - scale, logdet)
    return z, logdet


def _logit_cdf(x, p):
    log_tau, log_1m_tau = _log_cdf_pair(x, p)
    return log_tau - log_1m_tau, log_tau, log_1m_tau


def coupling_inverse(z, p, tol=1e-10, max_bisect=200, newton_steps=2, return_residual=False):
    """Invert :func:`coupling_forward` element-wise.

    The target CDF level is ``u = sigmoid((z - b) * exp(-a))``. Bisection
    runs on ``logit(CDF(x))`` (same ordering, better conditioned in the
    tails) until the bracket stops shrinking, then a few guarded Newton
    steps polish the result. Raises :class:`NumericFailure` if the bracket
    grows past ``MAX_BRACKET_WIDTH`` or ``|CDF(x) - u| > tol`` anywhere.
    """
    if tol <= 0:
        raise InputError("tol must be positive")
    with torch.no_grad():
        z = _as_input(z, p)
        target = (z - p.b) * torch.exp(-p.a)
        shape = torch.broadcast_shapes(target.shape, p.mu.shape[:-1])
        target = target.expand(shape)
        p = p.map(lambda t: t.expand(shape + t.shape[len(p.mu.shape) - 1:]))

        reach = 40 * torch.exp(p.s).amax(-1)
        lo = p.mu.amin(-1) - reach
        hi = p.mu.amax(-1) + reach
        for side in ("lo", "hi"):
            while True:
                edge = lo if side == "lo" else hi
                g_edge = _logit_cdf(edge, p)[0] - target
                out = g_edge > 0 if side == "lo" else g_edge < 0
                if not out.any():
                    break
                width = hi - lo
                if (width[out] > MAX_BRACKET_WIDTH).any():
                    raise NumericFailure(
                        f"bracket expansion exceeded width {MAX_BRACKET_WIDTH:g}",
                        where=f"element {_first_index(out)}")
                if side == "lo":
                    lo = torch.where(out, lo - width, lo)
                else:
                    hi = torch.where(out, hi + width, hi)

        for _ in range(max_bisect):
            mid = 0.5 * (lo + hi)
            done = (mid <= lo) | (mid >= hi)
            if done.all():
                break
            above = (_logit_cdf(mid, p)[0] - target) > 0
            hi = torch.where(above & ~done, mid, hi)
            lo = torch.where(~above & ~done, mid, lo)

        g_lo = _logit_cdf(lo, p)[0] - target
        g_hi = _logit_cdf(hi, p)[0] - target
        x = torch.where(g_hi.abs() < g_lo.abs(), hi, lo)
        g = torch.where(g_hi.abs() < g_lo.abs(), g_hi, g_lo)
        for _ in range(newton_steps):
            logit, log_tau, log_1m_tau = _logit_cdf(x, p)
            slope = torch.exp(mix_log_pdf(x, p) - log_tau - log_1m_tau)
            cand = x - g / slope
            ok = (cand >= lo) & (cand <= hi) & torch.isfinite(cand)
            cand = torch.where(ok, cand, x)
            g_cand = _logit_cdf(cand, p)[0] - target
            better = g_cand.abs() < g.abs()
            x = torch.where(better, cand, x)
            g = torch.where(better, g_cand, g)

        collapsed = p.collapsed()
        if collapsed.any():
            loc, scale = _collapsed_loc_scale(p)
            x = torch.where(collapsed, loc + target * torch.exp(scale), x)

        residual = (torch.exp(_log_cdf_pair(x, p)[0]) - torch.sigmoid(target)).abs()
        worst = residual.max() if residual.numel() else residual.new_tensor(0.0)
        if not torch.isfinite(x).all() or worst > tol:
            raise NumericFailure(
                f"CDF inversion residual {float(worst):.3g} exceeds tol {tol:g}",
                where=f"element {_first_index(residual > tol)}")
    if return_residual:
        return x, residual
    return x


def _first_index(mask):
    idx = mask.nonzero()
    return tuple(idx[0].tolist()) if len(idx) else None
