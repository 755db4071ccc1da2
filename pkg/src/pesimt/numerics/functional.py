"""Fused differentiable building blocks used by the model and the losses."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, make_node, matmul, unbroadcast

SQUASH_EPS = 1e-12


def _masked_max(x: np.ndarray, mask: np.ndarray, axis: int) -> np.ndarray:
    m = np.where(mask, x, -np.inf).max(axis=axis, keepdims=True)
    return np.where(np.isfinite(m), m, 0.0)


def masked_softmax(logits, mask, axis: int = -1, sequential: bool = False,
                   return_flag: bool = False):
    """Softmax over ``axis`` restricted to entries where ``mask`` is true.

    Masked-out entries are exactly 0. A slice whose mask is entirely false
    comes back as all zeros; with ``return_flag=True`` a boolean array marking
    those degenerate slices is returned alongside the result.
    ``sequential`` makes the normaliser a strict left-to-right sum (see
    :func:`pesimt.numerics.tensor.tsum`).
    """
    logits = as_tensor(logits)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    x = logits.data
    shifted = np.where(mask, x - _masked_max(x, mask, axis), 0.0)
    e = np.where(mask, np.exp(shifted), 0.0)
    if sequential:
        den = np.take(np.cumsum(e, axis=axis), [-1], axis=axis)
    else:
        den = e.sum(axis=axis, keepdims=True)
    degenerate = den == 0
    out = e / np.where(degenerate, 1.0, den)

    def bw(g):
        return (out * (g - (out * g).sum(axis=axis, keepdims=True)),)

    result = make_node(out, (logits,), bw)
    if return_flag:
        return result, np.squeeze(degenerate, axis=axis)
    return result


def softmax(logits, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    return masked_softmax(logits, np.ones(logits.shape, dtype=bool), axis=axis)


def log_softmax(logits, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    x = logits.data
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (logits,), bw)


def squash(v, axis: int = -1) -> Tensor:
    """Capsule nonlinearity ``|v|^2/(1+|v|^2) * v/|v|``.

    Vectors with norm below 1e-12 map to zero (with zero gradient).
    """
    v = as_tensor(v)
    x = v.data
    sq = (x * x).sum(axis=axis, keepdims=True)
    n = np.sqrt(sq)
    tiny = n < SQUASH_EPS
    safe_n = np.where(tiny, 1.0, n)
    scale = np.where(tiny, 0.0, n / (1.0 + sq))
    out = scale * x

    def bw(g):
        # d scale / d n = (1 - n^2) / (1 + n^2)^2, chained through dn/dv = v/n
        dscale = np.where(tiny, 0.0, (1.0 - sq) / ((1.0 + sq) ** 2 * safe_n))
        return (scale * g + x * dscale * (x * g).sum(axis=axis, keepdims=True),)

    return make_node(out, (v,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, unbroadcast(g * xhat, gamma.shape), unbroadcast(g, beta.shape)

    return make_node(out, (x, gamma, beta), bw)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)

    return make_node(table.data[ids], (table,), bw)


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a seeded generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return make_node(x.data * keep, (x,), lambda g: (g * keep,))


def _stable_matmul(x: Tensor, w: Tensor) -> Tensor:
    def bw(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gw

    return make_node(np.einsum("...i,ij->...j", x.data, w.data), (x, w), bw)


def linear(x, weight, bias=None, stable: bool = False) -> Tensor:
    """``x @ weight + bias``.

    ``stable`` computes each output row with numpy's einsum loops, so a row's
    value does not depend on how many other rows are in the batch (BLAS picks
    shape-dependent kernels). Gradients always use BLAS.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    out = _stable_matmul(x, weight) if stable else matmul(x, weight)
    return out if bias is None else out + bias


def squared_norm(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    return (x * x).sum(axis=axis)


def mse(pred, target) -> Tensor:
    diff = as_tensor(pred) - as_tensor(target)
    return (diff * diff).mean()


def label_smoothed_nll(logits, targets, epsilon: float = 0.0) -> Tensor:
    """Per-position label-smoothed negative log-likelihood.

    ``(1 - eps) * -log p[y] + eps * mean_v(-log p[v])``; with ``eps = 0``
    this is the plain NLL. Returns a tensor shaped like ``targets``.
    """
    lp = log_softmax(logits, axis=-1)
    vocab = lp.shape[-1]
    onehot = np.eye(vocab, dtype=lp.dtype)[np.asarray(targets)]
    weights = (1.0 - epsilon) * onehot + epsilon / vocab
    return -(lp * weights).sum(axis=-1)


def causal_mask(n: int) -> np.ndarray:
    """``mask[q, k]`` true when query ``q`` may see key ``k`` (``k <= q``)."""
    return np.tril(np.ones((n, n), dtype=bool))


def prefix_mask(available, n_keys: int) -> np.ndarray:
    """``mask[..., t, i]`` true when source position ``i < available[..., t]``."""
    avail = np.asarray(available)
    return np.arange(n_keys) < avail[..., None]
