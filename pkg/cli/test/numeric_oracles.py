#!/usr/bin/env python3
"""
Slow but obvious reference implementations the tests compare against
"""

import numpy as np


def brute_force_capacity(topk_idx, num_experts, capacity, order=None):
    """Token-by-token capacity scan with explicit per-expert counters"""
    topk_idx = np.asarray(topk_idx)
    num_tokens, top_k = topk_idx.shape
    order = range(num_tokens) if order is None else order
    used = [0] * num_experts
    kept = np.zeros((num_tokens, top_k), dtype=bool)
    for token in order:
        for rank in range(top_k):
            expert = int(topk_idx[token, rank])
            if used[expert] < capacity:
                used[expert] += 1
                kept[token, rank] = True
    return kept


def silu(values):
    return values / (1.0 + np.exp(-values))


def dense_swiglu(x, w_gate, w_up, w_out):
    return (silu(x @ w_gate) * (x @ w_up)) @ w_out


def dense_moe(x, experts, router_weights, topk_idx, kept):
    """
    Evaluates every expert on every token and masks the outputs:
    y_t = sum_e [e chosen and kept for t] * p_t(e) * FFN_e(x_t)
    """
    logits = x @ router_weights
    shifted = logits - logits.max(axis=-1, keepdims=True)
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=-1, keepdims=True)
    y = np.zeros_like(x)
    for expert_id, (w_gate, w_up, w_out) in enumerate(experts):
        mask = ((topk_idx == expert_id) & kept).any(axis=1)
        out = dense_swiglu(x, w_gate, w_up, w_out)
        y += (mask * probs[:, expert_id])[:, None] * out
    return y


def random_experts(rng, num_experts, width, hidden, scale=0.5):
    return [
        (
            rng.normal(0, scale, (width, hidden)),
            rng.normal(0, scale, (width, hidden)),
            rng.normal(0, scale, (hidden, width)),
        )
        for _ in range(num_experts)
    ]


def softmax(values, axis=-1):
    shifted = values - values.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=axis, keepdims=True)


def layer_norm(x, gain, bias, eps=1e-5):
    centred = x - x.mean(axis=-1, keepdims=True)
    variance = (centred**2).mean(axis=-1, keepdims=True)
    return centred / np.sqrt(variance + eps) * gain + bias


def rotate(x, base=10000.0):
    """Rotary embedding of B x T x N x H_Head at positions 0 .. T-1"""
    head_dim = x.shape[-1]
    inv_freq = base ** (-np.arange(0, head_dim, 2) / head_dim)
    angles = np.arange(x.shape[1])[:, None] * inv_freq
    cos = np.cos(angles)[None, :, None, :]
    sin = np.sin(angles)[None, :, None, :]
    out = np.empty_like(x)
    out[..., 0::2] = x[..., 0::2] * cos - x[..., 1::2] * sin
    out[..., 1::2] = x[..., 0::2] * sin + x[..., 1::2] * cos
    return out


def causal_attention(x, params, num_heads):
    batch, seq_len, hidden = x.shape
    head_dim = hidden // num_heads

    def heads(name):
        return (x @ params[name]).reshape(batch, seq_len, num_heads, head_dim)

    query = rotate(heads("attn.w_q")).transpose(0, 2, 1, 3)
    key = rotate(heads("attn.w_k")).transpose(0, 2, 1, 3)
    value = heads("attn.w_v").transpose(0, 2, 1, 3)
    scores = query @ key.transpose(0, 1, 3, 2) / np.sqrt(head_dim)
    future = np.triu(np.ones((seq_len, seq_len), dtype=bool), k=1)
    weights = softmax(np.where(future, -np.inf, scores))
    mixed = (weights @ value).transpose(0, 2, 1, 3)
    return mixed.reshape(batch, seq_len, hidden) @ params["attn.w_o"]


def reference_block(x, params, num_heads, num_experts=0, top_k=1):
    """
    One pre-LayerNorm block written out in numpy. With num_experts > 0 it
    is a residual MoE block where every assignment is kept:
    (MoE(x'') + FFN(x'')) + x'.
    """
    normed = layer_norm(x, params["ln1.gain"], params["ln1.bias"])
    x_attn = causal_attention(normed, params, num_heads) + x
    normed = layer_norm(x_attn, params["ln2.gain"], params["ln2.bias"])
    ffn = dense_swiglu(
        normed, params["ffn.w_gate"], params["ffn.w_up"], params["ffn.w_out"]
    )
    if not num_experts:
        return ffn + x_attn

    flat = normed.reshape(-1, normed.shape[-1])
    logits = flat @ params["moe.router"]
    probs = softmax(logits)
    chosen = np.argsort(-logits, axis=-1, kind="stable")[:, :top_k]
    moe = np.zeros_like(flat)
    for token in range(flat.shape[0]):
        for expert in chosen[token]:
            prefix = f"moe.experts.{expert}."
            moe[token] += probs[token, expert] * dense_swiglu(
                flat[token],
                params[prefix + "w_gate"],
                params[prefix + "w_up"],
                params[prefix + "w_out"],
            )
    return (moe.reshape(x.shape) + ffn) + x_attn
