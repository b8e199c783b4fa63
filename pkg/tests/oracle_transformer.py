"""Brute-force float64 reference for the sequence models, written first and
kept frozen; the production module must match it, never the other way around.

Everything here is computed with explicit per-query loops and hand-written
softmax/layer-norm so that agreement with the vectorized implementation is
evidence, not tautology. Parameters come in as a dict of numpy arrays keyed by
the torch state_dict names.
"""

import math

import numpy as np
from scipy import special


def linear(x, w, b):
    # torch convention: w is [out, in]
    return x @ w.T + b


def gelu(x):
    return 0.5 * x * (1.0 + special.erf(x / math.sqrt(2.0)))


def layer_norm(x, gain, bias, eps=1e-5):
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gain + bias


def softmax(v):
    e = np.exp(v - np.max(v))
    return e / e.sum()


def attention(x, p, prefix, n_heads, allowed):
    """Multi-head self-attention, one query at a time.

    allowed[i, j] says whether query i may attend to key j; disallowed keys are
    simply excluded from the softmax.
    """
    T, h = x.shape
    dh = h // n_heads
    qkv = linear(x, p[f"{prefix}.qkv.weight"], p[f"{prefix}.qkv.bias"])
    q, k, v = qkv[:, :h], qkv[:, h:2 * h], qkv[:, 2 * h:]
    out = np.zeros((T, h))
    for head in range(n_heads):
        sl = slice(head * dh, (head + 1) * dh)
        for i in range(T):
            keys = [j for j in range(T) if allowed[i, j]]
            scores = np.array([q[i, sl] @ k[j, sl] / math.sqrt(dh) for j in keys])
            w = softmax(scores)
            out[i, sl] = sum(w[n] * v[j, sl] for n, j in enumerate(keys))
    return linear(out, p[f"{prefix}.proj.weight"], p[f"{prefix}.proj.bias"])


def block(x, p, prefix, n_heads, allowed):
    y = layer_norm(x, p[f"{prefix}.norm1.weight"], p[f"{prefix}.norm1.bias"])
    x = x + attention(y, p, f"{prefix}.attn", n_heads, allowed)
    y = layer_norm(x, p[f"{prefix}.norm2.weight"], p[f"{prefix}.norm2.bias"])
    y = linear(y, p[f"{prefix}.fc1.weight"], p[f"{prefix}.fc1.bias"])
    y = linear(gelu(y), p[f"{prefix}.fc2.weight"], p[f"{prefix}.fc2.bias"])
    return x + y


def position_indices(L, train_len):
    idx = np.arange(L, dtype=np.float64)
    if L > train_len and L > 1:
        idx = idx * (train_len - 1) / (L - 1)
    return idx


def sinusoid(indices, h):
    table = np.zeros((len(indices), h))
    for n, t in enumerate(indices):
        for i in range(h // 2):
            rate = 10000.0 ** (2.0 * i / h)
            table[n, 2 * i] = math.sin(t / rate)
            table[n, 2 * i + 1] = math.cos(t / rate)
    return table


def _mlp_head(x, p, prefix):
    y = linear(x, p[f"{prefix}.0.weight"], p[f"{prefix}.0.bias"])
    return linear(gelu(y), p[f"{prefix}.2.weight"], p[f"{prefix}.2.bias"])


def _embed_pairs(p, states, actions, train_len):
    L = states.shape[0]
    h = p["state_embed.weight"].shape[0]
    pos = sinusoid(position_indices(L, train_len), h)
    se = linear(states, p["state_embed.weight"], p["state_embed.bias"]) + pos
    ae = linear(actions, p["action_embed.weight"], p["action_embed.bias"]) + pos
    tokens = np.zeros((2 * L, h))
    tokens[0::2] = se
    tokens[1::2] = ae
    return tokens, pos


def masked_forward(p, n_heads, n_enc, n_dec, train_len, states, actions,
                   state_vis, action_vis):
    """Full masked-reconstruction pipeline; returns (pred_states, pred_actions)."""
    L = states.shape[0]
    h = p["state_embed.weight"].shape[0]
    tokens, pos = _embed_pairs(p, states, actions, train_len)
    vis = np.zeros(2 * L, dtype=bool)
    vis[0::2] = state_vis
    vis[1::2] = action_vis
    slots = np.flatnonzero(vis)

    x = tokens[slots]
    full_attn = np.ones((len(slots), len(slots)), dtype=bool)
    for i in range(n_enc):
        x = block(x, p, f"encoder.{i}", n_heads, full_attn)
    x = layer_norm(x, p["enc_norm.weight"], p["enc_norm.bias"])

    full = np.tile(p["mask_token"], (2 * L, 1))
    full[slots] = x
    seq = np.zeros_like(full)
    seq[0::2] = linear(full[0::2], p["state_reproj.weight"], p["state_reproj.bias"]) + pos
    seq[1::2] = linear(full[1::2], p["action_reproj.weight"], p["action_reproj.bias"]) + pos

    all_attn = np.ones((2 * L, 2 * L), dtype=bool)
    for i in range(n_dec):
        seq = block(seq, p, f"decoder.{i}", n_heads, all_attn)
    seq = layer_norm(seq, p["dec_norm.weight"], p["dec_norm.bias"])

    pred_states = _mlp_head(seq[0::2], p, "state_head")
    pred_actions = _mlp_head(seq[1::2], p, "action_head")
    return pred_states, pred_actions


def causal_forward(p, n_heads, n_enc, n_dec, train_len, states, actions,
                   drop_last_action=False):
    """Same stack under a lower-triangular attention mask; returns features."""
    tokens, pos = _embed_pairs(p, states, actions, train_len)
    if drop_last_action:
        tokens = tokens[:-1]
    T = tokens.shape[0]
    causal = np.tril(np.ones((T, T), dtype=bool))

    x = tokens
    for i in range(n_enc):
        x = block(x, p, f"encoder.{i}", n_heads, causal)
    x = layer_norm(x, p["enc_norm.weight"], p["enc_norm.bias"])

    seq = np.zeros_like(x)
    even = np.arange(T) % 2 == 0
    seq[even] = linear(x[even], p["state_reproj.weight"], p["state_reproj.bias"])
    seq[~even] = linear(x[~even], p["action_reproj.weight"], p["action_reproj.bias"])
    steps = np.arange(T) // 2
    seq = seq + pos[steps]

    for i in range(n_dec):
        seq = block(seq, p, f"decoder.{i}", n_heads, causal)
    return layer_norm(seq, p["dec_norm.weight"], p["dec_norm.bias"])
