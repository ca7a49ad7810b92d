"""Forward/backward pairs for the layers used by the aligner and decoder.

Every ``*_fwd`` returns ``(output, cache)``; the matching ``*_bwd`` takes the
upstream gradient and the cache and returns the input gradient plus a dict of
parameter gradients. Parameter gradients are only produced for names listed
in ``need`` so frozen weights never get gradient entries.
"""

from __future__ import annotations

import math

import numpy as np

NEG_INF = -1e30
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def _flat(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


def linear_fwd(x, W, b):
    y = x @ W
    if b is not None:
        y = y + b
    return y, x


def linear_bwd(dy, x, W, need_w: bool, need_b: bool):
    dx = dy @ W.T
    dW = _flat(x).T @ _flat(dy) if need_w else None
    db = _flat(dy).sum(axis=0) if need_b else None
    return dx, dW, db


def layernorm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layernorm_bwd(dy, cache, need_params: bool):
    xhat, inv, g = cache
    dxhat = dy * g
    n = xhat.shape[-1]
    dx = inv / n * (
        n * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    if need_params:
        return dx, _flat(dy * xhat).sum(axis=0), _flat(dy).sum(axis=0)
    return dx, None, None


def gelu_fwd(x):
    u = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_bwd(dy, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def softmax(s, axis=-1):
    m = s.max(axis=axis, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=axis, keepdims=True)


def _split_heads(x, heads):
    B, L, D = x.shape
    return x.reshape(B, L, heads, D // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, H * dh)


def _proj_fwd(x, p, name, lora, lora_scale):
    y = x @ p[f"{name}.W"] + p[f"{name}.b"]
    xa = None
    if lora is not None and name in lora:
        A, Bm = lora[name]
        xa = x @ A.T
        y = y + lora_scale * (xa @ Bm.T)
    return y, xa


def _proj_bwd(dy, x, xa, p, prefix, name, lora, lora_names, lora_scale, need, grads):
    W = p[f"{name}.W"]
    dx = dy @ W.T
    if f"{prefix}{name}.W" in need:
        grads[f"{prefix}{name}.W"] = _flat(x).T @ _flat(dy)
    if f"{prefix}{name}.b" in need:
        grads[f"{prefix}{name}.b"] = _flat(dy).sum(axis=0)
    if xa is not None:
        A, Bm = lora[name]
        a_name, b_name = lora_names[name]
        dxa = lora_scale * (dy @ Bm)
        if b_name in need:
            grads[b_name] = lora_scale * (_flat(dy).T @ _flat(xa))
        if a_name in need:
            grads[a_name] = _flat(dxa).T @ _flat(x)
        dx = dx + dxa @ A
    return dx


def mha_fwd(xq, xkv, p, prefix, heads, allowed, lora=None, lora_scale=1.0):
    """Multi-head attention.

    ``p`` maps local names (``q.W``, ``q.b``, ... ``o.b``) to arrays; ``prefix``
    turns them into global parameter names for the gradient dict. ``allowed``
    is a boolean mask broadcastable to (B, 1, Lq, Lk). ``lora`` optionally maps
    ``"q"``/``"v"`` to ``(A, B)`` adapter pairs.
    """
    q, qa = _proj_fwd(xq, p, "q", lora, lora_scale)
    k, _ = _proj_fwd(xkv, p, "k", None, lora_scale)
    v, va = _proj_fwd(xkv, p, "v", lora, lora_scale)
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    scale = 1.0 / math.sqrt(qh.shape[-1])
    s = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    s = np.where(allowed, s, NEG_INF)
    a = softmax(s)
    oh = a @ vh
    o = _merge_heads(oh)
    out = o @ p["o.W"] + p["o.b"]
    cache = (xq, xkv, qa, va, qh, kh, vh, a, o, scale, heads, prefix)
    return out, cache


def mha_bwd(dout, cache, p, need, grads, lora=None, lora_names=None, lora_scale=1.0, self_attn=False):
    xq, xkv, qa, va, qh, kh, vh, a, o, scale, heads, prefix = cache
    if f"{prefix}o.W" in need:
        grads[f"{prefix}o.W"] = _flat(o).T @ _flat(dout)
    if f"{prefix}o.b" in need:
        grads[f"{prefix}o.b"] = _flat(dout).sum(axis=0)
    do = dout @ p["o.W"].T
    doh = _split_heads(do, heads)
    da = doh @ vh.transpose(0, 1, 3, 2)
    dvh = a.transpose(0, 1, 3, 2) @ doh
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
    dqh = ds @ kh
    dkh = ds.transpose(0, 1, 3, 2) @ qh
    dq, dk, dv = (_merge_heads(t) for t in (dqh, dkh, dvh))
    dxq = _proj_bwd(dq, xq, qa, p, prefix, "q", lora, lora_names, lora_scale, need, grads)
    dxkv = _proj_bwd(dk, xkv, None, p, prefix, "k", None, None, lora_scale, need, grads)
    dxkv = dxkv + _proj_bwd(dv, xkv, va, p, prefix, "v", lora, lora_names, lora_scale, need, grads)
    if self_attn:
        return dxq + dxkv, None
    return dxq, dxkv


def ffn_fwd(x, p):
    h, _ = linear_fwd(x, p["ffn1.W"], p["ffn1.b"])
    g, gcache = gelu_fwd(h)
    y, _ = linear_fwd(g, p["ffn2.W"], p["ffn2.b"])
    return y, (x, g, gcache)


def ffn_bwd(dy, cache, p, prefix, need, grads):
    x, g, gcache = cache
    dg, dW2, db2 = linear_bwd(dy, g, p["ffn2.W"], f"{prefix}ffn2.W" in need, f"{prefix}ffn2.b" in need)
    dh = gelu_bwd(dg, gcache)
    dx, dW1, db1 = linear_bwd(dh, x, p["ffn1.W"], f"{prefix}ffn1.W" in need, f"{prefix}ffn1.b" in need)
    for name, val in (("ffn2.W", dW2), ("ffn2.b", db2), ("ffn1.W", dW1), ("ffn1.b", db1)):
        if val is not None:
            grads[prefix + name] = val
    return dx


def cross_entropy(logits, targets):
    """Mean cross-entropy over rows; returns (loss, dlogits)."""
    n = logits.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(logits)
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), targets].mean()
    d = np.exp(logp)
    d[np.arange(n), targets] -= 1.0
    return float(loss), d / n
