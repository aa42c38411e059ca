"""Feature-tokenizer Transformer for tabular rows.

Tokens: a learned classification token, one value-scaled token per dense
feature (x_k * W_k + b_k), and one learned embedding per active sparse
column (capped at ``max_tokens`` by column prevalence; padding is masked).
There is no positional encoding, so the logit does not depend on token order.
Token states are kept packed (real tokens only) and scattered into a padded
grid just for the attention product; the last block only computes the
classification token's query.

Each block is post-norm:

    X1 = LN(X  + drop_res(MHSA(X)))
    X2 = LN(X1 + drop_res(W2 drop_ffn(ReLU(W1 X1))))

and the classification token's final state feeds a linear head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import nn
from .batches import Batch

N_SPECIAL = 1  # classification token


def init_params(hp: dict, n_sparse: int, n_dense: int, ffn_hidden: int, rng: np.random.Generator,
                dtype=np.float32):
    d = hp["embedding_dim"]
    p = {
        "tok.E": nn.uniform_init(rng, (n_sparse, d), d, dtype),
        "tok.Wd": nn.uniform_init(rng, (n_dense, d), d, dtype),
        "tok.bd": nn.uniform_init(rng, (n_dense, d), d, dtype),
        "tok.cls": nn.uniform_init(rng, (d,), d, dtype),
    }
    for i in range(hp["n_blocks"]):
        for name in ("q", "k", "v", "o"):
            lp = nn.linear_params(rng, d, d, f"block{i}.attn", dtype)
            p[f"block{i}.attn.W{name}"] = lp[f"block{i}.attn.W"]
            p[f"block{i}.attn.b{name}"] = lp[f"block{i}.attn.b"]
        p.update(nn.linear_params(rng, d, ffn_hidden, f"block{i}.ffn1", dtype))
        p.update(nn.linear_params(rng, ffn_hidden, d, f"block{i}.ffn2", dtype))
        for ln in ("ln1", "ln2"):
            p[f"block{i}.{ln}.gamma"] = np.ones(d, dtype)
            p[f"block{i}.{ln}.beta"] = np.zeros(d, dtype)
    p.update(nn.linear_params(rng, d, 1, "head.out", dtype))
    return p, {}


@dataclass
class Layout:
    """Packed token positions for one batch.

    Tokens are stored row-major as an (N, d) array: for each row the
    classification token, the dense tokens, then the active sparse tokens.
    ``row``/``slot`` give each packed token's place in the padded (B, T) grid
    that attention works on.
    """

    B: int
    T: int
    row: np.ndarray
    slot: np.ndarray
    key_mask: np.ndarray  # (B, T)
    cls_idx: np.ndarray  # (B,)
    dense_idx: np.ndarray  # (B, n_dense)
    sparse_idx: np.ndarray  # (M,)
    sparse_col: np.ndarray  # (M,)


def layout_of(batch: Batch) -> Layout:
    tok = batch.tokens
    B, n_dense = batch.dense.shape
    valid = tok >= 0
    lengths = N_SPECIAL + n_dense + valid.sum(axis=1)
    start = np.zeros(B, dtype=np.int64)
    np.cumsum(lengths[:-1], out=start[1:])
    N = int(lengths.sum())
    row = np.repeat(np.arange(B), lengths)
    slot = np.arange(N) - np.repeat(start, lengths)
    T = N_SPECIAL + n_dense + tok.shape[1]
    key_mask = np.arange(T)[None, :] < lengths[:, None]
    vr, vl = np.nonzero(valid)
    return Layout(
        B=B, T=T, row=row, slot=slot, key_mask=key_mask,
        cls_idx=start,
        dense_idx=start[:, None] + N_SPECIAL + np.arange(n_dense)[None, :],
        sparse_idx=start[vr] + N_SPECIAL + n_dense + vl,
        sparse_col=tok[vr, vl],
    )


def tokens_of(p: dict, batch: Batch, lay: Layout) -> np.ndarray:
    """Packed token states (N, d)."""
    X = np.empty((len(lay.row), p["tok.cls"].shape[0]), dtype=p["tok.cls"].dtype)
    X[lay.cls_idx] = p["tok.cls"]
    X[lay.dense_idx] = batch.dense[:, :, None] * p["tok.Wd"][None] + p["tok.bd"][None]
    X[lay.sparse_idx] = p["tok.E"][lay.sparse_col]
    return X


def _pad(x, lay: Layout, rows, slots, Tq):
    out = np.zeros((lay.B, Tq, x.shape[1]), dtype=x.dtype)
    out[rows, slots] = x
    return out


def _block_fwd(p, hp, i, X, lay: Layout, rng, last: bool):
    """One post-norm block. With ``last`` only the classification tokens are
    used as queries, since nothing downstream reads the other positions."""
    key = f"block{i}"
    dt = X.dtype.type
    if last:
        q_idx, q_row, q_slot, Tq = lay.cls_idx, np.arange(lay.B), np.zeros(lay.B, dtype=np.int64), 1
    else:
        q_idx, q_row, q_slot, Tq = None, lay.row, lay.slot, lay.T
    Xq = X if q_idx is None else X[q_idx]
    q = Xq @ p[f"{key}.attn.Wq"] + p[f"{key}.attn.bq"]
    k = X @ p[f"{key}.attn.Wk"] + p[f"{key}.attn.bk"]
    v = X @ p[f"{key}.attn.Wv"] + p[f"{key}.attn.bv"]
    drop_attn = nn.dropout_mask(rng, (lay.B, hp["n_heads"], Tq, lay.T), hp["attention_dropout"], dt)
    ctx, core = nn.attention_core_fwd(_pad(q, lay, q_row, q_slot, Tq), _pad(k, lay, lay.row, lay.slot, lay.T),
                                      _pad(v, lay, lay.row, lay.slot, lay.T), hp["n_heads"], lay.key_mask, drop_attn)
    ctx = ctx[q_row, q_slot]
    a = ctx @ p[f"{key}.attn.Wo"] + p[f"{key}.attn.bo"]
    r1 = nn.dropout_mask(rng, a.shape, hp["residual_dropout"], dt)
    X1, ln1_c = nn.layernorm_fwd(Xq + nn.dropout_apply(a, r1), p[f"{key}.ln1.gamma"], p[f"{key}.ln1.beta"])
    f, _ = nn.linear_fwd(X1, p[f"{key}.ffn1.W"], p[f"{key}.ffn1.b"])
    f, relu_m = nn.relu_fwd(f)
    fm = nn.dropout_mask(rng, f.shape, hp["ffn_dropout"], dt)
    f = nn.dropout_apply(f, fm)
    f2, _ = nn.linear_fwd(f, p[f"{key}.ffn2.W"], p[f"{key}.ffn2.b"])
    r2 = nn.dropout_mask(rng, f2.shape, hp["residual_dropout"], dt)
    X2, ln2_c = nn.layernorm_fwd(X1 + nn.dropout_apply(f2, r2), p[f"{key}.ln2.gamma"], p[f"{key}.ln2.beta"])
    cache = (X, Xq, q_idx, q_row, q_slot, Tq, core, ctx, r1, ln1_c, X1, relu_m, fm, f, r2, ln2_c)
    return X2, cache


def _block_bwd(p, hp, i, dX2, lay: Layout, cache):
    key = f"block{i}"
    X, Xq, q_idx, q_row, q_slot, Tq, core, ctx, r1, ln1_c, X1, relu_m, fm, f, r2, ln2_c = cache
    g = {}
    dS2, g[f"{key}.ln2.gamma"], g[f"{key}.ln2.beta"] = nn.layernorm_bwd(dX2, ln2_c)
    df, g[f"{key}.ffn2.W"], g[f"{key}.ffn2.b"] = nn.linear_bwd(nn.dropout_apply(dS2, r2), f, p[f"{key}.ffn2.W"])
    df = nn.relu_bwd(nn.dropout_apply(df, fm), relu_m)
    dX1, g[f"{key}.ffn1.W"], g[f"{key}.ffn1.b"] = nn.linear_bwd(df, X1, p[f"{key}.ffn1.W"])
    dS1, g[f"{key}.ln1.gamma"], g[f"{key}.ln1.beta"] = nn.layernorm_bwd(dX1 + dS2, ln1_c)
    dctx, g[f"{key}.attn.Wo"], g[f"{key}.attn.bo"] = nn.linear_bwd(nn.dropout_apply(dS1, r1), ctx, p[f"{key}.attn.Wo"])
    dq, dk, dv = nn.attention_core_bwd(_pad(dctx, lay, q_row, q_slot, Tq), core)
    dq, dk, dv = dq[q_row, q_slot], dk[lay.row, lay.slot], dv[lay.row, lay.slot]
    dXq, g[f"{key}.attn.Wq"], g[f"{key}.attn.bq"] = nn.linear_bwd(dq, Xq, p[f"{key}.attn.Wq"])
    dX, g[f"{key}.attn.Wk"], g[f"{key}.attn.bk"] = nn.linear_bwd(dk, X, p[f"{key}.attn.Wk"])
    dXv, g[f"{key}.attn.Wv"], g[f"{key}.attn.bv"] = nn.linear_bwd(dv, X, p[f"{key}.attn.Wv"])
    dX += dXv
    if q_idx is None:
        dX += dXq + dS1
    else:
        dX[q_idx] += dXq + dS1
    return dX, g


def forward(p: dict, state: dict, hp: dict, batch: Batch, train: bool, rng=None):
    lay = layout_of(batch)
    X = tokens_of(p, batch, lay)
    rng = rng if train else None
    caches = []
    n = hp["n_blocks"]
    for i in range(n):
        X, c = _block_fwd(p, hp, i, X, lay, rng, last=(i == n - 1))
        caches.append(c)
    logit, _ = nn.linear_fwd(X, p["head.out.W"], p["head.out.b"])  # X holds the classification tokens now
    return logit[:, 0], {"batch": batch, "layout": lay, "blocks": caches, "cls": X, "stats": {}}


def attention_weights(p: dict, hp: dict, batch: Batch, block: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Inference-mode attention probabilities of one block, (B, heads, T, T), and the key mask."""
    lay = layout_of(batch)
    X = tokens_of(p, batch, lay)
    for i in range(block):
        X = _block_fwd(p, hp, i, X, lay, None, last=False)[0]
    _, cache = _block_fwd(p, hp, block, X, lay, None, last=False)
    return cache[6][3], lay.key_mask


def backward(p: dict, hp: dict, cache: dict, dlogit: np.ndarray) -> dict:
    cls = cache["cls"]
    lay = cache["layout"]
    g = {}
    dX, g["head.out.W"], g["head.out.b"] = nn.linear_bwd(dlogit[:, None].astype(cls.dtype), cls, p["head.out.W"])
    for i in reversed(range(hp["n_blocks"])):
        dX, gi = _block_bwd(p, hp, i, dX, lay, cache["blocks"][i])
        g.update(gi)
    batch = cache["batch"]
    g["tok.cls"] = dX[lay.cls_idx].sum(axis=0)
    dd = dX[lay.dense_idx]
    g["tok.bd"] = dd.sum(axis=0)
    g["tok.Wd"] = (dd * batch.dense[:, :, None]).sum(axis=0)
    dtok = dX[lay.sparse_idx]
    scatter = sp.csr_matrix(
        (np.ones(len(dtok), dtype=dtok.dtype), (lay.sparse_col, np.arange(len(dtok)))),
        shape=(p["tok.E"].shape[0], len(dtok)),
    )
    g["tok.E"] = np.asarray(scatter @ dtok).astype(dtok.dtype)
    return g
