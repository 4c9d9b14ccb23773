"""Numpy neural-net primitives with explicit forward/backward pairs.

Every forward returns (output, cache); the matching backward consumes the cache
and returns input gradients plus parameter gradients. All functions are pure
and dtype-preserving, which is what makes the finite-difference gradient checks
in the test suite meaningful.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def linear_forward(x, w, b):
    out = x @ w + b
    return out, (x, w)


def linear_backward(dout, cache):
    x, w = cache
    din, dout_dim = w.shape
    dw = x.reshape(-1, din).T @ dout.reshape(-1, dout_dim)
    db = dout.reshape(-1, dout_dim).sum(axis=0)
    dx = dout @ w.T
    return dx, dw, db


def gelu_forward(x):
    phi = 0.5 * (1.0 + erf(x / _SQRT2))
    return x * phi, (x, phi)


def gelu_backward(dout, cache):
    x, phi = cache
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return dout * (phi + x * pdf)


def layernorm_forward(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def layernorm_backward(dout, cache):
    xhat, inv, g = cache
    d = xhat.shape[-1]
    dg = (dout * xhat).reshape(-1, d).sum(axis=0)
    db = dout.reshape(-1, d).sum(axis=0)
    dxhat = dout * g
    dx = inv * (dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def batchnorm_forward(x, g, b, running_mean, running_var, train,
                      momentum=0.1, eps=1e-5):
    """Batch statistics in training (running stats updated in place), running
    statistics in inference. ``x`` is (N, d)."""
    if train:
        n = x.shape[0]
        mu = x.mean(axis=0)
        xc = x - mu
        var = np.mean(xc * xc, axis=0)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
        return g * xhat + b, (xhat, inv, g, True)
    inv = 1.0 / np.sqrt(running_var + eps)
    xhat = (x - running_mean) * inv
    return g * xhat + b, (xhat, inv, g, False)


def batchnorm_backward(dout, cache):
    xhat, inv, g, trained = cache
    dg = (dout * xhat).sum(axis=0)
    db = dout.sum(axis=0)
    dxhat = dout * g
    if not trained:
        return dxhat * inv, dg, db
    n = xhat.shape[0]
    dx = (inv / n) * (n * dxhat
                      - dxhat.sum(axis=0)
                      - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dg, db


def softmax_last(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dout, a):
    return a * (dout - (dout * a).sum(axis=-1, keepdims=True))


def dropout_forward(x, rate, rng, train):
    if not train or rate <= 0.0:
        return x, None
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep, keep


def dropout_backward(dout, keep):
    if keep is None:
        return dout
    return dout * keep


def per_row_nll(logits, targets):
    """Per-row negative log-likelihood (no gradient), float64."""
    n = logits.shape[0]
    if n == 0:
        return np.zeros(0)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=-1))
    return (logsumexp - shifted[np.arange(n), targets]).astype(np.float64)


def cross_entropy(logits, targets):
    """Mean cross-entropy over rows plus the gradient w.r.t. logits.

    ``logits`` is (N, V); ``targets`` is (N,) int. Returns (loss, dlogits) with
    dlogits already scaled by 1/N. Loss is accumulated in float64.
    """
    n = logits.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(logits)
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    logsumexp = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - logsumexp
    loss = float(-log_probs[np.arange(n), targets].astype(np.float64).mean())
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n
    return loss, dlogits


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm
