"""Residual MLP for tabular rows.

    row -> embedding (sum of sparse column vectors + dense projection)
        -> linear to layer_width
        -> n_layers x [BN -> Linear(w, w*f) -> ReLU -> drop1 -> Linear(w*f, w) -> drop2 -> + skip]
        -> BN -> ReLU -> Linear(w, 1)
"""

from __future__ import annotations

import numpy as np

from . import nn
from .batches import Batch


def init_params(hp: dict, n_sparse: int, n_dense: int, rng: np.random.Generator, dtype=np.float32):
    e, w = hp["embedding_size"], hp["layer_width"]
    hidden = w * hp["hidden_factor"]
    fan = n_sparse + n_dense
    p = {
        "emb.E": nn.uniform_init(rng, (n_sparse, e), fan, dtype),
        "emb.Wd": nn.uniform_init(rng, (n_dense, e), fan, dtype),
        "emb.b": nn.uniform_init(rng, (e,), fan, dtype),
    }
    p.update(nn.linear_params(rng, e, w, "proj", dtype))
    state = {}
    for i in range(hp["n_layers"]):
        p[f"block{i}.bn.gamma"] = np.ones(w, dtype)
        p[f"block{i}.bn.beta"] = np.zeros(w, dtype)
        p.update(nn.linear_params(rng, w, hidden, f"block{i}.l1", dtype))
        p.update(nn.linear_params(rng, hidden, w, f"block{i}.l2", dtype))
        state[f"block{i}.bn.running_mean"] = np.zeros(w, dtype)
        state[f"block{i}.bn.running_var"] = np.ones(w, dtype)
    p["head.bn.gamma"] = np.ones(w, dtype)
    p["head.bn.beta"] = np.zeros(w, dtype)
    state["head.bn.running_mean"] = np.zeros(w, dtype)
    state["head.bn.running_var"] = np.ones(w, dtype)
    p.update(nn.linear_params(rng, w, 1, "head.out", dtype))
    return p, state


def _bn(x, p, state, key, train):
    if train:
        return nn.batchnorm_train_fwd(x, p[f"{key}.gamma"], p[f"{key}.beta"])
    out = nn.batchnorm_infer(x, p[f"{key}.gamma"], p[f"{key}.beta"],
                             state[f"{key}.running_mean"], state[f"{key}.running_var"])
    return out, None, None


def forward(p: dict, state: dict, hp: dict, batch: Batch, train: bool, rng=None):
    """Logits for the batch. In training mode ``rng`` drives dropout and the
    returned cache carries batch statistics for the running averages."""
    dt = p["emb.E"].dtype
    cache = {"batch": batch, "stats": {}}
    h = nn.embedding_bag_fwd(batch.S, p["emb.E"]) + batch.dense @ p["emb.Wd"] + p["emb.b"]
    cache["emb_out"] = h
    h, _ = nn.linear_fwd(h, p["proj.W"], p["proj.b"])
    blocks = []
    for i in range(hp["n_layers"]):
        key = f"block{i}"
        z, bn_cache, stats = _bn(h, p, state, f"{key}.bn", train)
        a, _ = nn.linear_fwd(z, p[f"{key}.l1.W"], p[f"{key}.l1.b"])
        a, relu_mask = nn.relu_fwd(a)
        m1 = nn.dropout_mask(rng if train else None, a.shape, hp["dropout_first"], dt.type)
        a = nn.dropout_apply(a, m1)
        u, _ = nn.linear_fwd(a, p[f"{key}.l2.W"], p[f"{key}.l2.b"])
        m2 = nn.dropout_mask(rng if train else None, u.shape, hp["dropout_last"], dt.type)
        u = nn.dropout_apply(u, m2)
        blocks.append((bn_cache, z, relu_mask, m1, a, m2))
        cache["stats"][f"{key}.bn"] = stats
        h = h + u
    z, bn_cache, stats = _bn(h, p, state, "head.bn", train)
    cache["stats"]["head.bn"] = stats
    r, relu_mask = nn.relu_fwd(z)
    logit, _ = nn.linear_fwd(r, p["head.out.W"], p["head.out.b"])
    cache.update(blocks=blocks, head=(bn_cache, relu_mask, r))
    return logit[:, 0], cache


def backward(p: dict, hp: dict, cache: dict, dlogit: np.ndarray) -> dict:
    g = {}
    bn_cache, relu_mask, r = cache["head"]
    d = dlogit[:, None].astype(r.dtype)
    d, g["head.out.W"], g["head.out.b"] = nn.linear_bwd(d, r, p["head.out.W"])
    d = nn.relu_bwd(d, relu_mask)
    dh, g["head.bn.gamma"], g["head.bn.beta"] = nn.batchnorm_bwd(d, bn_cache)
    for i in reversed(range(hp["n_layers"])):
        key = f"block{i}"
        bn_c, z, relu_m, m1, a, m2 = cache["blocks"][i]
        du = nn.dropout_apply(dh, m2)
        da, g[f"{key}.l2.W"], g[f"{key}.l2.b"] = nn.linear_bwd(du, a, p[f"{key}.l2.W"])
        da = nn.dropout_apply(da, m1)
        da = nn.relu_bwd(da, relu_m)
        dz, g[f"{key}.l1.W"], g[f"{key}.l1.b"] = nn.linear_bwd(da, z, p[f"{key}.l1.W"])
        dx, g[f"{key}.bn.gamma"], g[f"{key}.bn.beta"] = nn.batchnorm_bwd(dz, bn_c)
        dh = dh + dx
    emb = cache["emb_out"]
    de, g["proj.W"], g["proj.b"] = nn.linear_bwd(dh, emb, p["proj.W"])
    batch = cache["batch"]
    g["emb.E"] = nn.embedding_bag_bwd(de, batch.S).astype(de.dtype)
    g["emb.Wd"] = batch.dense.T @ de
    g["emb.b"] = de.sum(axis=0)
    return g
