"""Toy MoE transformer with TM-RoPE attention, a KV cache and chunked prefill.

All weights come from ``numpy.random.default_rng(config.seed)`` so a config
fully describes a model. Inputs are either opaque integer token IDs (looked
up in a seeded embedding table) or ready-made feature rows of width
``d_model``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tmrope import DEFAULT_SPLIT, AngleAllocation, PositionTriple, build_angle_allocation, rotate


@dataclass(frozen=True)
class MoEConfig:
    d_model: int = 256
    n_heads: int = 2
    head_dim: int = 128
    n_experts: int = 4
    top_k: int = 2
    ffn_dim: int = 256
    n_layers: int = 1
    vocab_size: int = 512
    rope_split: tuple[int, int, int] = DEFAULT_SPLIT
    rope_theta: float = 1_000_000.0
    seed: int = 0

    def __post_init__(self):
        if self.head_dim * self.n_heads != self.d_model:
            raise ValueError("head_dim * n_heads must equal d_model")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError("need 1 <= top_k <= n_experts")
        if not 1 <= self.n_layers <= 4:
            raise ValueError("n_layers must be in 1..4")


def top_k_indices(logits: np.ndarray, k: int) -> np.ndarray:
    # stable sort on the negated logits: equal logits keep index order
    return np.argsort(-np.asarray(logits), kind="stable")[:k]


def route_logits(logits, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k selection and softmax gates over the selected logits."""
    logits = np.asarray(logits, dtype=np.float64)
    ids = top_k_indices(logits, k)
    sel = logits[ids]
    g = np.exp(sel - sel.max())
    return ids, g / g.sum()


def _silu(x):
    return x / (1.0 + np.exp(-x))


def _rms_norm(x, eps=1e-6):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)


@dataclass
class Layer:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    router: np.ndarray  # (n_experts, d_model)
    w_in: np.ndarray  # (n_experts, d_model, ffn_dim)
    w_out: np.ndarray  # (n_experts, ffn_dim, d_model)


@dataclass
class KVCache:
    """Append-only per-layer keys/values, shape (L, n_heads, head_dim) each.

    Keys are stored already rotated.
    """

    keys: list[np.ndarray]
    values: list[np.ndarray]

    @classmethod
    def empty(cls, config: MoEConfig) -> "KVCache":
        shape = (0, config.n_heads, config.head_dim)
        return cls([np.zeros(shape) for _ in range(config.n_layers)],
                   [np.zeros(shape) for _ in range(config.n_layers)])

    def __len__(self):
        return self.keys[0].shape[0]

    def copy(self) -> "KVCache":
        return KVCache([k.copy() for k in self.keys], [v.copy() for v in self.values])


class MoECore:
    def __init__(self, config: MoEConfig | None = None):
        self.config = cfg = config or MoEConfig()
        rng = np.random.default_rng(cfg.seed)
        d, f, e = cfg.d_model, cfg.ffn_dim, cfg.n_experts
        s = 1 / math.sqrt(d)
        self.embedding = rng.normal(0, 1, (cfg.vocab_size, d))
        self.layers = [
            Layer(
                wq=rng.normal(0, s, (d, d)),
                wk=rng.normal(0, s, (d, d)),
                wv=rng.normal(0, s, (d, d)),
                wo=rng.normal(0, s, (d, d)),
                router=rng.normal(0, s, (e, d)),
                w_in=rng.normal(0, s, (e, d, f)),
                w_out=rng.normal(0, 1 / math.sqrt(f), (e, f, d)),
            )
            for _ in range(cfg.n_layers)
        ]
        self.alloc: AngleAllocation = build_angle_allocation(
            cfg.head_dim, cfg.rope_split, cfg.rope_theta
        )

    # -- pieces ---------------------------------------------------------------

    def embed(self, tokens) -> np.ndarray:
        x = np.asarray(tokens)
        if x.ndim == 1 and np.issubdtype(x.dtype, np.integer):
            return self.embedding[x % self.config.vocab_size]
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.config.d_model:
            raise ValueError(f"feature rows must be (n, {self.config.d_model})")
        return x

    def route(self, hidden, layer: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Expert ids (top-k of the router logits, ties to the lower id) and gates."""
        hidden = np.asarray(hidden, dtype=np.float64)
        return route_logits(self.layers[layer].router @ hidden, self.config.top_k)

    def expert(self, hidden, idx: int, layer: int = 0) -> np.ndarray:
        lyr = self.layers[layer]
        return _silu(hidden @ lyr.w_in[idx]) @ lyr.w_out[idx]

    def moe_forward(self, hidden, layer: int = 0) -> np.ndarray:
        """Gate-weighted sum of the selected experts, for one vector or a batch of rows."""
        h = np.asarray(hidden, dtype=np.float64)
        if h.ndim == 1:
            ids, gates = self.route(h, layer)
            return sum(g * self.expert(h, i, layer) for i, g in zip(ids, gates))
        return np.vstack([self.moe_forward(row, layer) for row in h]) if len(h) else h.copy()

    # -- attention / blocks ---------------------------------------------------

    def _heads(self, x):
        return x.reshape(x.shape[0], self.config.n_heads, self.config.head_dim)

    def _block(self, li: int, x: np.ndarray, pos: np.ndarray, cache: KVCache) -> np.ndarray:
        cfg, lyr = self.config, self.layers[li]
        h = _rms_norm(x)
        q = self._heads(h @ lyr.wq)
        k = self._heads(h @ lyr.wk)
        v = self._heads(h @ lyr.wv)
        # rotate per head: (n, heads, hd) -> (heads, n, hd)
        q = rotate(q.transpose(1, 0, 2), pos, self.alloc)
        k = rotate(k.transpose(1, 0, 2), pos, self.alloc).transpose(1, 0, 2)
        past = cache.keys[li].shape[0]
        keys = np.concatenate([cache.keys[li], k])
        vals = np.concatenate([cache.values[li], v])
        cache.keys[li], cache.values[li] = keys, vals

        n, total = x.shape[0], keys.shape[0]
        scores = np.einsum("hnd,thd->hnt", q, keys) / math.sqrt(cfg.head_dim)
        causal = np.arange(total)[None, :] <= (past + np.arange(n))[:, None]
        scores = np.where(causal[None], scores, -np.inf)
        scores -= scores.max(axis=-1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=-1, keepdims=True)
        attn = np.einsum("hnt,thd->nhd", p, vals).reshape(n, cfg.d_model)
        x = x + attn @ lyr.wo
        return x + self.moe_forward(_rms_norm(x), li)

    def extend(self, cache: KVCache, tokens, triples) -> np.ndarray:
        """Run new tokens on top of ``cache`` (mutated in place); returns their hidden states."""
        x = self.embed(tokens) if len(tokens) else np.zeros((0, self.config.d_model))
        if len(triples) != x.shape[0]:
            raise ValueError("tokens and triples differ in length")
        if x.shape[0] == 0:
            return x
        pos = np.asarray([tuple(p) for p in triples], dtype=np.int64)
        past = len(cache)
        for li in range(self.config.n_layers):
            x = self._block(li, x, pos, cache)
        assert all(len(k) == past + x.shape[0] for k in cache.keys)
        return x

    # -- public inference API -------------------------------------------------

    def prefill(self, tokens, triples) -> tuple[np.ndarray, KVCache]:
        cache = KVCache.empty(self.config)
        return self.extend(cache, tokens, triples), cache

    def prefill_chunked(self, tokens, triples, chunk_size: int) -> tuple[np.ndarray, KVCache]:
        if chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if len(tokens) != len(triples):
            raise ValueError("tokens and triples differ in length")
        cache = KVCache.empty(self.config)
        outs = [
            self.extend(cache, tokens[i : i + chunk_size], triples[i : i + chunk_size])
            for i in range(0, len(tokens), chunk_size)
        ]
        hidden = np.vstack(outs) if outs else np.zeros((0, self.config.d_model))
        return hidden, cache

    def decode_step(self, cache: KVCache, token, triple: PositionTriple) -> tuple[np.ndarray, KVCache]:
        """One token on top of ``cache``; the cache grows by one and is returned."""
        tok = np.asarray([token]) if np.ndim(token) == 0 else np.asarray(token, dtype=np.float64)[None, :]
        return self.extend(cache, tok, [triple])[0], cache

    def next_token(self, hidden) -> int:
        """Greedy id from tied embeddings; argmax ties go to the lowest id."""
        return int(np.argmax(self.embedding @ np.asarray(hidden)))

    def greedy_decode(self, cache: KVCache, last_hidden, n_tokens: int, next_id: int):
        """Greedy continuation with text positions next_id, next_id+1, ...

        Returns (token ids, hidden states) of the generated tokens.
        """
        ids, hiddens = [], []
        h = last_hidden
        for step in range(n_tokens):
            tok = self.next_token(h)
            p = next_id + step
            h, cache = self.decode_step(cache, tok, PositionTriple(p, p, p))
            ids.append(tok)
            hiddens.append(h)
        return ids, (np.vstack(hiddens) if hiddens else np.zeros((0, self.config.d_model)))


def text_triples(n: int, start: int = 0) -> list[PositionTriple]:
    return [PositionTriple(start + i, start + i, start + i) for i in range(n)]
