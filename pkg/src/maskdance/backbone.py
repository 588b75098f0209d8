"""Genre-conditioned masked token transformer and its mask schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import LayerNorm, Linear, Module, TransformerLayer, param


class BackboneError(ValueError):
    pass


class MaskedTransformer(Module):
    """Bidirectional transformer over ``[genre] + tokens``.

    Token table rows: ``0..K-1`` codes, ``K`` = [MASK], ``K+1`` = [PAD].
    Genre table rows: ``0..G-1`` genres, ``G`` = learned null condition.
    """

    def __init__(self, codes: int, genres: int, width: int = 128, heads: int = 4, depth: int = 4,
                 max_tokens: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.codes, self.n_genres, self.width, self.depth = codes, genres, width, depth
        self.max_tokens = max_tokens
        self.tok_emb = param(rng.normal(0, 0.02, size=(codes + 2, width)))
        self.pos_emb = param(rng.normal(0, 0.02, size=(max_tokens + 1, width)))
        self.genre_emb = param(rng.normal(0, 0.02, size=(genres + 1, width)))
        self.layers = [TransformerLayer(width, heads, rng) for _ in range(depth)]
        self.ln_f = LayerNorm(width)
        self.head = Linear(width, codes, rng, std=0.02)

    @property
    def mask_id(self) -> int:
        return self.codes

    @property
    def pad_id(self) -> int:
        return self.codes + 1

    @property
    def null_genre(self) -> int:
        return self.n_genres

    def genre_ids(self, genre, batch: int) -> np.ndarray:
        """Normalise a genre argument (None, int, or per-row array; None/-1 = null)."""
        if genre is None:
            return np.full(batch, self.null_genre, dtype=np.int64)
        g = np.broadcast_to(np.asarray(genre, dtype=np.int64), (batch,)).copy()
        g[g < 0] = self.null_genre
        if (g > self.null_genre).any():
            raise BackboneError(f"genre id out of table (max {self.n_genres - 1})")
        return g

    def embed(self, ids: np.ndarray, genre=None):
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        B, n = ids.shape
        if n > self.max_tokens:
            raise BackboneError(f"sequence of {n} tokens exceeds max_tokens={self.max_tokens}")
        if ids.min() < 0 or ids.max() > self.pad_id:
            raise BackboneError("token id out of range")
        g = self.genre_ids(genre, B)
        tok = ad.embedding(self.tok_emb, ids)
        gen = ad.embedding(self.genre_emb, g[:, None])
        x = ad.concat([gen, tok], axis=1) + self.pos_emb[: n + 1]
        pad = np.concatenate([np.zeros((B, 1), bool), ids == self.pad_id], axis=1)
        key_bias = np.where(pad, -1e9, 0.0).astype(np.float32)
        return x, key_bias

    def run_layers(self, x, key_bias, injections=None):
        for i, layer in enumerate(self.layers):
            if injections is not None and injections[i] is not None:
                inj = injections[i]
                zero = Tensor(np.zeros((inj.shape[0], 1, inj.shape[2]), dtype=np.float32))
                x = x + ad.concat([zero, inj], axis=1)
            x = layer(x, key_bias)
        return x

    def forward_logits(self, ids, genre=None, injections=None) -> Tensor:
        """Logits (B, n, K) for every token position.

        ``injections[i]`` (B, n, width), when given, is added to the token positions of
        layer ``i``'s input.
        """
        x, key_bias = self.embed(ids, genre)
        if injections is not None and len(injections) != self.depth:
            raise BackboneError("need one injection slot per layer")
        x = self.run_layers(x, key_bias, injections)
        return self.head(self.ln_f(x))[:, 1:]


# ---------------------------------------------------------------- masking

def training_mask_ratio(u: float) -> float:
    return float(np.clip(math.cos(math.pi * u / 2.0), 0.1, 1.0))


def training_mask(ids: np.ndarray, rng: np.random.Generator, mask_id: int, pad_id: int | None = None,
                  u: float | None = None):
    """Corrupt one token sequence with a cosine-scheduled random mask.

    Returns ``(corrupted, mask)``.
    """
    ids = np.asarray(ids, dtype=np.int64)
    n = ids.shape[-1]
    if n < 2:
        raise BackboneError("need at least two tokens to mask")
    valid = np.ones(n, bool) if pad_id is None else ids != pad_id
    n_valid = int(valid.sum())
    if u is None:
        u = rng.uniform()
    count = max(1, int(round(training_mask_ratio(u) * n_valid)))
    order = rng.permutation(np.flatnonzero(valid))
    mask = np.zeros(n, bool)
    mask[order[:count]] = True
    corrupted = np.where(mask, mask_id, ids)
    return corrupted, mask


def t2m_loss(logits, targets, mask, pad=None, unmask_weight: float = 1.0) -> Tensor:
    """Cross-entropy over non-pad positions; masked weighted 1, unmasked ``unmask_weight``."""
    mask = np.asarray(mask, dtype=bool)
    w = np.where(mask, 1.0, unmask_weight)
    if pad is not None:
        w = w * ~np.asarray(pad, dtype=bool)
    return ad.cross_entropy(logits, targets, w.astype(np.float32))


def remask_count(L: int, t: int, total_steps: int) -> int:
    """Tokens still masked after iteration ``t`` of ``total_steps``: floor(L cos(pi t / 2T))."""
    if not 0 <= t <= total_steps:
        raise BackboneError("t must lie in [0, total_steps]")
    if t == total_steps:
        return 0
    value = L * math.cos(math.pi * t / (2.0 * total_steps))
    nearest = round(value)
    if abs(value - nearest) < 1e-9:
        return int(nearest)
    return int(math.floor(value))


@dataclass(frozen=True)
class MaskSchedule:
    total_steps: int = 18

    def counts(self, L: int) -> list[int]:
        return [remask_count(L, t, self.total_steps) for t in range(self.total_steps + 1)]

    def training_ratio(self, rng: np.random.Generator) -> float:
        return training_mask_ratio(rng.uniform())
