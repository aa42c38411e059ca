"""Hand-written forward/backward primitives for the neural learners.

Every layer is a pair of functions: ``*_fwd`` returns the output and a cache,
``*_bwd`` maps the output gradient (and cache) to input and parameter
gradients. There is no graph; models call the pairs in order and in reverse.
All functions work in whatever float dtype they are given, so the same code
trains in float32 and is gradient-checked in float64.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp

BN_EPS = 1e-5
LN_EPS = 1e-5
BN_MOMENTUM = 0.1


# -- parameters ---------------------------------------------------------------

def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def linear_params(rng, n_in: int, n_out: int, prefix: str, dtype=np.float32) -> dict:
    return {
        f"{prefix}.W": uniform_init(rng, (n_in, n_out), n_in, dtype),
        f"{prefix}.b": uniform_init(rng, (n_out,), n_in, dtype),
    }


# -- dense layers ---------------------------------------------------------------

def linear_fwd(x, W, b):
    return x @ W + b, x


def linear_bwd(d, x, W):
    x2 = x.reshape(-1, x.shape[-1])
    d2 = d.reshape(-1, d.shape[-1])
    return d @ W.T, x2.T @ d2, d2.sum(axis=0)


def relu_fwd(x):
    mask = x > 0
    return x * mask, mask


def relu_bwd(d, mask):
    return d * mask


def dropout_mask(rng: np.random.Generator | None, shape, p: float, dtype):
    """Inverted-dropout multiplier, or ``None`` when dropout is inactive."""
    if rng is None or p <= 0.0:
        return None
    keep = rng.random(shape, dtype=np.float32) >= p
    return keep.astype(dtype) / dtype(1.0 - p)


def dropout_apply(x, mask):
    return x if mask is None else x * mask


def batchnorm_train_fwd(x, gamma, beta):
    mu = x.mean(axis=0)
    var = x.var(axis=0)
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu) * inv
    return xhat * gamma + beta, (xhat, inv, gamma), (mu, var)


def batchnorm_infer(x, gamma, beta, running_mean, running_var):
    return (x - running_mean) / np.sqrt(running_var + BN_EPS) * gamma + beta


def batchnorm_bwd(d, cache):
    xhat, inv, gamma = cache
    n = d.shape[0]
    dgamma = (d * xhat).sum(axis=0)
    dbeta = d.sum(axis=0)
    dxhat = d * gamma
    dx = (inv / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dgamma, dbeta


def update_running(state: dict, key: str, batch_stats, n: int) -> None:
    mu, var = batch_stats
    unbiased = var * (n / max(n - 1, 1))
    m = state[f"{key}.running_mean"]
    v = state[f"{key}.running_var"]
    state[f"{key}.running_mean"] = ((1 - BN_MOMENTUM) * m + BN_MOMENTUM * mu).astype(m.dtype)
    state[f"{key}.running_var"] = ((1 - BN_MOMENTUM) * v + BN_MOMENTUM * unbiased).astype(v.dtype)


def layernorm_fwd(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layernorm_bwd(d, cache):
    xhat, inv, gamma = cache
    dxhat = d * gamma
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    red = tuple(range(d.ndim - 1))
    return dx, (d * xhat).sum(axis=red), d.sum(axis=red)


# -- sparse embedding -------------------------------------------------------

def indicator_matrix(indptr, indices, n_cols: int, dtype) -> sp.csr_matrix:
    data = np.ones(len(indices), dtype=dtype)
    return sp.csr_matrix((data, indices, indptr), shape=(len(indptr) - 1, n_cols))


def embedding_bag_fwd(S: sp.csr_matrix, E):
    """Sum of the embedding rows of each row's active columns."""
    return np.asarray(S @ E)


def embedding_bag_bwd(d, S: sp.csr_matrix):
    return np.asarray(S.T @ d)


# -- attention --------------------------------------------------------------

def softmax_masked(scores, key_mask):
    """Softmax over the last axis; ``key_mask`` (B, T) is True for real keys."""
    s = np.where(key_mask[:, None, None, :], scores, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def attention_core_fwd(q, k, v, n_heads: int, key_mask, drop_mask):
    """Scaled dot-product attention on padded tensors.

    ``q`` is (B, Tq, d), ``k`` and ``v`` are (B, T, d); ``key_mask`` (B, T)
    marks real keys. Returns the (B, Tq, d) context and a cache.
    """
    B, Tq, d = q.shape
    T = k.shape[1]
    dh = d // n_heads
    qh = q.reshape(B, Tq, n_heads, dh).transpose(0, 2, 1, 3)
    kh = k.reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)
    vh = v.reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)
    scale = q.dtype.type(1.0 / math.sqrt(dh))
    P = softmax_masked(qh @ kh.transpose(0, 1, 3, 2) * scale, key_mask)
    Pd = dropout_apply(P, drop_mask)
    ctx = (Pd @ vh).transpose(0, 2, 1, 3).reshape(B, Tq, d)
    return ctx, (qh, kh, vh, P, Pd, drop_mask, scale)


def attention_core_bwd(dctx, cache):
    qh, kh, vh, P, Pd, drop_mask, scale = cache
    B, h, Tq, dh = qh.shape
    T = kh.shape[2]
    dctx_h = dctx.reshape(B, Tq, h, dh).transpose(0, 2, 1, 3)
    dPd = dctx_h @ vh.transpose(0, 1, 3, 2)
    dvh = Pd.transpose(0, 1, 3, 2) @ dctx_h
    dP = dropout_apply(dPd, drop_mask)
    dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * scale
    dqh = dS @ kh
    dkh = dS.transpose(0, 1, 3, 2) @ qh

    def merge(t, n):
        return t.transpose(0, 2, 1, 3).reshape(B, n, h * dh)

    return merge(dqh, Tq), merge(dkh, T), merge(dvh, T)


# -- loss and optimiser --------------------------------------------------------

def bce_with_logits(logits, y):
    """Mean binary cross-entropy and its gradient with respect to the logits."""
    loss = np.logaddexp(0.0, logits) - y * logits
    prob = 0.5 * (1.0 + np.tanh(0.5 * logits))
    return float(loss.mean()), (prob - y) / len(y)


class Adam:
    def __init__(self, params: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float | None = None) -> None:
        self.t += 1
        lr = self.lr if lr is None else lr
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        step = lr * math.sqrt(c2) / c1
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            params[k] -= (step * m / (np.sqrt(v) + self.eps * math.sqrt(c2))).astype(params[k].dtype)
