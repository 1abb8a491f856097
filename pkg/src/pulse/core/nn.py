"""Layer building blocks shared by the sequence backbone and the text encoders."""
from __future__ import annotations

import numpy as np

from pulse.core import autodiff as ad
from pulse.core.autodiff import Tensor
from pulse.core.params import ParamStore

NEG_INF = -1e9


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)


def add_linear(store: ParamStore, name: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> None:
    store.add(f"{name}.w", xavier(rng, fan_in, fan_out))
    store.add(f"{name}.b", np.zeros(fan_out, dtype=np.float32))


def add_layer_norm(store: ParamStore, name: str, dim: int) -> None:
    store.add(f"{name}.g", np.ones(dim, dtype=np.float32))
    store.add(f"{name}.b", np.zeros(dim, dtype=np.float32))


def linear(x: Tensor, store: ParamStore, name: str) -> Tensor:
    return x @ store[f"{name}.w"] + store[f"{name}.b"]


def layer_norm(x: Tensor, store: ParamStore, name: str) -> Tensor:
    return ad.layer_norm(x, store[f"{name}.g"], store[f"{name}.b"])


def add_block(store: ParamStore, name: str, dim: int, rng: np.random.Generator, ffn_dim: int | None = None) -> None:
    """Parameters of one pre-norm transformer block."""
    ffn_dim = ffn_dim or dim
    add_layer_norm(store, f"{name}.ln1", dim)
    for proj in ("q", "k", "v", "o"):
        add_linear(store, f"{name}.{proj}", dim, dim, rng)
    add_layer_norm(store, f"{name}.ln2", dim)
    add_linear(store, f"{name}.ff1", dim, ffn_dim, rng)
    add_linear(store, f"{name}.ff2", ffn_dim, dim, rng)


def attention_bias(key_mask: np.ndarray, causal: bool, dtype=np.float32) -> np.ndarray:
    """Additive (B, 1, L, L) bias: 0 where a query may attend a key, -1e9 elsewhere."""
    b, length = key_mask.shape
    allowed = np.broadcast_to(key_mask[:, None, None, :], (b, 1, length, length))
    if causal:
        allowed = allowed & np.tril(np.ones((length, length), dtype=bool))[None, None]
    return np.where(allowed, 0.0, NEG_INF).astype(dtype)


def self_attention(x: Tensor, store: ParamStore, name: str, n_heads: int, bias: np.ndarray,
                   drop: float = 0.0, rng=None, training: bool = False) -> Tensor:
    b, length, dim = x.shape
    dh = dim // n_heads

    def heads(t: Tensor) -> Tensor:
        return t.reshape(b, length, n_heads, dh).transpose(0, 2, 1, 3)

    q = heads(linear(x, store, f"{name}.q"))
    k = heads(linear(x, store, f"{name}.k"))
    v = heads(linear(x, store, f"{name}.v"))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)) + Tensor(bias.astype(x.dtype))
    attn = ad.dropout(ad.softmax(scores, axis=-1), drop, rng, training)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, length, dim)
    return linear(ctx, store, f"{name}.o")


def block(x: Tensor, store: ParamStore, name: str, n_heads: int, bias: np.ndarray,
          drop: float = 0.0, rng=None, training: bool = False) -> Tensor:
    h = x + ad.dropout(self_attention(layer_norm(x, store, f"{name}.ln1"), store, f"{name}", n_heads,
                                      bias, drop, rng, training), drop, rng, training)
    ff = linear(ad.relu(linear(layer_norm(h, store, f"{name}.ln2"), store, f"{name}.ff1")), store, f"{name}.ff2")
    return h + ad.dropout(ff, drop, rng, training)
