"""Residual simplified Swin transformer with Euclidean-distance attention.

The block stacks J window-attention layers whose attention logits are
negative Euclidean distances between projected tokens (plus a learnable
relative positional bias), alternates regular and shifted window
partitions, and closes with a linear layer and an outer residual. Each
layer runs multi-head attention and an MLP in parallel and mixes them
with two learnable scalars; there is no residual inside the layer
itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .errors import ConfigError, ShapeError
from .modules import Dense, LayerNorm, init_weight
from .tensor import Tensor, matmul, reshape, transpose

ATTENTION_KINDS = ("euclidean", "dot_product")


@dataclass
class RssteConfig:
    dim: int = 32
    heads: int = 2
    window: int = 8
    depth: int = 2
    attention_kind: str = "euclidean"
    mlp_ratio: int = 2
    epsilon_norm: float = 1e-12

    def validate(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        if self.dim % self.heads != 0:
            raise ConfigError(
                f"heads ({self.heads}) must divide feature dim ({self.dim})"
            )
        if self.attention_kind not in ATTENTION_KINDS:
            raise ConfigError(
                f"attention_kind must be one of {ATTENTION_KINDS}, got "
                f"{self.attention_kind!r}"
            )


def euclidean_attention(q: Tensor, k: Tensor, v: Tensor,
                        bias: Tensor | None = None,
                        eps: float = 1e-12) -> Tensor:
    """softmax(-dist(Q, K) + B) V over the last two axes.

    Rows of the attention matrix are convex weights, so with B = 0 the
    heaviest key for each query is its Euclidean nearest neighbour.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(
            f"head dimensions disagree: Q {q.shape} vs K {k.shape}"
        )
    logits = -F.pairwise_distance(q, k, eps=eps)
    if bias is not None:
        logits = logits + bias
    return matmul(F.softmax(logits, axis=-1), v)


def dot_product_attention(q: Tensor, k: Tensor, v: Tensor,
                          bias: Tensor | None = None) -> Tensor:
    """Standard scaled dot-product attention (ablation variant)."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(
            f"head dimensions disagree: Q {q.shape} vs K {k.shape}"
        )
    scale = 1.0 / np.sqrt(q.shape[-1])
    logits = matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))) * scale
    if bias is not None:
        logits = logits + bias
    return matmul(F.softmax(logits, axis=-1), v)


class SsteLayer:
    """One simplified transformer layer on window-partitioned tokens."""

    def __init__(self, cfg: RssteConfig, rng: np.random.Generator, dtype=np.float32):
        c = cfg.dim
        hidden = cfg.mlp_ratio * c
        self.cfg = cfg
        self.norm = LayerNorm(c, dtype=dtype)
        self.p_q = init_weight(rng, (c, c), c, dtype)
        self.p_k = init_weight(rng, (c, c), c, dtype)
        table = (2 * cfg.window - 1) ** 2
        self.bias_table = Tensor(np.zeros((table, cfg.heads), dtype=dtype),
                                 requires_grad=True)
        self.alpha = Tensor(np.asarray(1.0, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.asarray(0.1, dtype=dtype), requires_grad=True)
        self.mlp_in = Dense(c, hidden, rng, dtype)
        self.mlp_out = Dense(hidden, c, rng, dtype)

    def named_parameters(self, prefix: str):
        yield from self.norm.named_parameters(f"{prefix}.norm")
        yield f"{prefix}.p_q", self.p_q
        yield f"{prefix}.p_k", self.p_k
        yield f"{prefix}.bias_table", self.bias_table
        yield f"{prefix}.alpha", self.alpha
        yield f"{prefix}.beta", self.beta
        yield from self.mlp_in.named_parameters(f"{prefix}.mlp_in")
        yield from self.mlp_out.named_parameters(f"{prefix}.mlp_out")

    def _positional_bias(self, n_tokens: int) -> Tensor:
        m = int(round(np.sqrt(n_tokens)))
        if m * m != n_tokens:
            raise ShapeError(
                f"token count {n_tokens} is not a square window (axis -2)"
            )
        # for m < window (direct calls on small token sets) the offsets
        # still index inside the table, which is sized for the largest m
        idx = F.relative_position_index(m)
        gathered = F.gather_rows(self.bias_table, idx)  # (n, n, h)
        return transpose(gathered, (2, 0, 1))  # (h, n, n)

    def _msa(self, xn: Tensor) -> Tensor:
        b, n, c = xn.shape
        h = self.cfg.heads
        d = c // h
        q = matmul(xn, self.p_q)
        k = matmul(xn, self.p_k)
        v = xn

        def heads(t):
            return transpose(reshape(t, (b, n, h, d)), (0, 2, 1, 3))

        qh, kh, vh = heads(q), heads(k), heads(v)
        bias = self._positional_bias(n)  # (h, n, n), broadcasts over batch
        if self.cfg.attention_kind == "euclidean":
            out = euclidean_attention(qh, kh, vh, bias, eps=self.cfg.epsilon_norm)
        else:
            out = dot_product_attention(qh, kh, vh, bias)
        return reshape(transpose(out, (0, 2, 1, 3)), (b, n, c))

    def __call__(self, tokens: Tensor) -> Tensor:
        xn = self.norm(tokens, axis=-1)
        msa = self._msa(xn)
        mlp = self.mlp_out(F.gelu(self.mlp_in(xn)))
        return self.alpha * msa + self.beta * mlp


class Rsste:
    """J SSTE layers with alternating window shifts, a linear tail, and an
    outer residual connection back to the block input."""

    def __init__(self, cfg: RssteConfig, rng: np.random.Generator, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.layers = [SsteLayer(cfg, rng, dtype) for _ in range(cfg.depth)]
        self.final = Dense(cfg.dim, cfg.dim, rng, dtype)

    def named_parameters(self, prefix: str):
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}.layer{i}")
        yield from self.final.named_parameters(f"{prefix}.final")

    def shift_for_layer(self, index: int) -> int:
        """Shift schedule: regular on odd layers, half-window on even (1-indexed)."""
        return 0 if index % 2 == 0 else self.cfg.window // 2

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ShapeError(f"expected NCHW feature map, got shape {x.shape}")
        if x.shape[1] != self.cfg.dim:
            raise ShapeError(
                f"feature dim (axis 1) is {x.shape[1]}, configured {self.cfg.dim}"
            )
        residual = x
        m = self.cfg.window
        feat = x
        for i, layer in enumerate(self.layers):
            tokens, meta = F.window_partition(feat, m, shift=self.shift_for_layer(i))
            tokens = layer(tokens)
            feat = F.window_reverse(tokens, meta)
        n, c, h, w = feat.shape
        t = transpose(feat, (0, 2, 3, 1))
        t = self.final(t)
        out = transpose(t, (0, 3, 1, 2))
        return out + residual

    def weight_matrices(self) -> list[tuple[str, Tensor]]:
        """Linear-layer weights subject to the orthogonality penalty."""
        mats = []
        for i, layer in enumerate(self.layers):
            mats.append((f"layer{i}.p_q", layer.p_q))
            mats.append((f"layer{i}.p_k", layer.p_k))
            mats.append((f"layer{i}.mlp_in", layer.mlp_in.weight))
            mats.append((f"layer{i}.mlp_out", layer.mlp_out.weight))
        mats.append(("final", self.final.weight))
        return mats
