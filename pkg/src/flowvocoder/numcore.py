"""Dense-array primitives the density estimator is built from.

Arrays are ``torch.Tensor`` objects; reverse-mode gradients come from
torch's autograd tape. The finite-difference helpers at the bottom never
touch autograd so they can serve as an independent check on it.
"""
import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, NumericFailure

CAUSAL_MODES = (None, "strict", "nonstrict")

DEFAULT_DTYPE = torch.float64


def _pair(v):
    if isinstance(v, int):
        return (v, v)
    v = tuple(int(e) for e in v)
    if len(v) != 2:
        raise ConfigurationError(f"expected an int or a pair, got {v!r}")
    return v


def conv_padding(kernel_size, dilation=1, causal=None):
    """Return ``(left, right, top, bottom)`` zero padding for ``conv2d``.

    Width is always padded symmetrically. Height is padded symmetrically
    when ``causal`` is None, otherwise only above row 0; ``"strict"`` adds
    one extra row so that output row ``i`` sees input rows ``< i`` only
    (the surplus last row is cropped by ``conv2d``).
    """
    if causal not in CAUSAL_MODES:
        raise ConfigurationError(f"unknown causal mode {causal!r}")
    kh, kw = _pair(kernel_size)
    dh, dw = _pair(dilation)
    rw = (kw - 1) * dw
    rh = (kh - 1) * dh
    left, right = rw // 2, rw - rw // 2
    if causal is None:
        top, bottom = rh // 2, rh - rh // 2
    elif causal == "nonstrict":
        top, bottom = rh, 0
    else:
        top, bottom = rh + 1, 0
    return left, right, top, bottom


def conv2d(input, kernel, bias=None, dilation=1, causal=None):
    """2-D convolution with "same" output extents.

    ``input`` is ``(C_in, h, w)`` or batched ``(B, C_in, h, w)``; ``kernel``
    is ``(C_out, C_in, kh, kw)``. See :func:`conv_padding` for the padding
    rules and the meaning of ``causal``.
    """
    if kernel.dim() != 4:
        raise ConfigurationError(f"kernel must be 4-D, got shape {tuple(kernel.shape)}")
    unbatched = input.dim() == 3
    if unbatched:
        input = input.unsqueeze(0)
    if input.dim() != 4:
        raise ConfigurationError(f"input must be 3-D or 4-D, got shape {tuple(input.shape)}")
    if input.shape[1] != kernel.shape[1]:
        raise ConfigurationError(
            f"input has {input.shape[1]} channels but kernel expects {kernel.shape[1]}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ConfigurationError(f"bias shape {tuple(bias.shape)} != ({kernel.shape[0]},)")
    h = input.shape[2]
    pad = conv_padding(kernel.shape[2:], dilation, causal)
    out = F.conv2d(F.pad(input, pad), kernel, bias, dilation=_pair(dilation))
    if causal == "strict":
        out = out[:, :, :h]
    return out[0] if unbatched else out


def gated_activation(pre):
    """``tanh(first half) * sigmoid(second half)`` along the channel axis."""
    axis = 0 if pre.dim() == 3 else 1
    channels = pre.shape[axis]
    if channels % 2:
        raise ConfigurationError(f"gated activation needs an even channel count, got {channels}")
    content, gate = pre.chunk(2, dim=axis)
    return torch.tanh(content) * torch.sigmoid(gate)


def _node_name(tensor):
    fn = tensor.grad_fn
    return type(fn).__name__ if fn is not None else "leaf"


def backward(loss, params):
    """Gradients of a scalar ``loss`` w.r.t. each tensor in ``params``.

    Parameters that did not influence the loss get an exact zero tensor.
    Non-finite values raise :class:`NumericFailure` naming the primitive
    that produced them.
    """
    params = list(params)
    if loss.numel() != 1:
        raise ConfigurationError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss).all():
        raise NumericFailure("non-finite loss", where=_node_name(loss))
    grads = torch.autograd.grad(loss, params, allow_unused=True, retain_graph=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    if all(torch.isfinite(g).all() for g in grads):
        return grads
    raise NumericFailure("non-finite gradient", where=_first_nonfinite_node(loss, params))


def _first_nonfinite_node(loss, params):
    """Replay the backward pass with hooks; name the first node emitting NaN/Inf."""
    culprits = []
    handles = []

    def hook(node):
        def check(grad_inputs, grad_outputs):
            if not culprits and any(g is not None and not torch.isfinite(g).all()
                                    for g in grad_inputs):
                culprits.append(node.name())
        return check

    seen = set()
    stack = [loss.grad_fn]
    while stack:
        node = stack.pop()
        if node is None or node in seen:
            continue
        seen.add(node)
        handles.append(node.register_hook(hook(node)))
        stack.extend(fn for fn, _ in node.next_functions)
    try:
        torch.autograd.grad(loss, params, allow_unused=True)
    finally:
        for h in handles:
            h.remove()
    return culprits[0] if culprits else "unknown"


def finite_difference_grad(fn, params, eps=1e-5):
    """Central-difference gradient of scalar ``fn()`` w.r.t. every entry of ``params``.

    Entries are perturbed in place and restored bit-exactly.
    """
    grads = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            g = torch.empty_like(flat)
            for idx in range(flat.numel()):
                orig = flat[idx].item()
                flat[idx] = orig + eps
                up = float(fn())
                flat[idx] = orig - eps
                down = float(fn())
                flat[idx] = orig
                g[idx] = (up - down) / (2 * eps)
            grads.append(g.view_as(p))
    return grads


def numerical_jacobian(fn, x, eps=1e-6):
    """Dense central-difference Jacobian of vector ``fn`` at 1-D numpy ``x``."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for idx in range(x.size):
        step = np.zeros_like(x)
        step[idx] = eps
        cols.append((np.asarray(fn(x + step)) - np.asarray(fn(x - step))) / (2 * eps))
    return np.stack(cols, axis=1)


def relative_error(actual, expected, floor=1.0):
    """``|a - e| / max(floor, |e|)`` element-wise, as a numpy array."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    return np.abs(actual - expected) / np.maximum(floor, np.abs(expected))
