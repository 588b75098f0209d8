"""Residual VQ-VAE mapping motion features to multi-layer token grids."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Conv1d, Module, buffer, param
from .motion import MotionSequence


class TokenizerError(ValueError):
    pass


class EmptyCodebookError(TokenizerError):
    pass


@dataclass
class TokenGrid:
    """Per-step code indices for every quantizer layer plus a mask channel.

    ``frames`` is the motion length the grid decodes back to (padding is trimmed).
    """

    indices: np.ndarray
    mask: np.ndarray | None = None
    frames: int | None = None
    downsample: int = 4

    def __post_init__(self):
        self.indices = np.atleast_2d(np.asarray(self.indices, dtype=np.int64))
        n = self.indices.shape[1]
        self.mask = np.zeros(n, dtype=bool) if self.mask is None else np.asarray(self.mask, dtype=bool)
        if self.mask.shape != (n,):
            raise TokenizerError("mask length must equal grid length")
        if self.frames is None:
            self.frames = n * self.downsample
        if not (n - 1) * self.downsample < self.frames <= n * self.downsample:
            raise TokenizerError("frames inconsistent with grid length and downsample factor")

    @property
    def length(self) -> int:
        return self.indices.shape[1]

    @property
    def layers(self) -> int:
        return self.indices.shape[0]

    def copy(self) -> "TokenGrid":
        return TokenGrid(self.indices.copy(), self.mask.copy(), self.frames, self.downsample)


@dataclass
class Codebook:
    entries: Tensor
    layer: int
    usage_count: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.usage_count is None:
            self.usage_count = np.zeros(self.entries.shape[0], dtype=np.int64)

    @property
    def size(self) -> int:
        return self.entries.shape[0]


# ---------------------------------------------------------------- quantisation

def nearest_code(x: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """argmin_l ||x - c_l||^2 along the last axis of ``x`` (float64 arithmetic)."""
    if entries.shape[0] == 0:
        raise EmptyCodebookError("codebook has no entries")
    flat = x.reshape(-1, x.shape[-1]).astype(np.float64)
    c = entries.astype(np.float64)
    d = (flat * flat).sum(1, keepdims=True) - 2.0 * flat @ c.T + (c * c).sum(1)[None, :]
    return d.argmin(axis=1).reshape(x.shape[:-1])


def quantize(z: np.ndarray, codebooks):
    """Residual quantisation of latents ``z`` (..., d).

    Returns ``(indices, quantized, residual_norms)`` where ``indices`` has the layer axis
    first and ``residual_norms[l]`` is the norm left after layer ``l``.
    """
    z = np.asarray(z, dtype=np.float32)
    residual = z.copy()
    quantized = np.zeros_like(z)
    indices, norms = [], []
    for cb in codebooks:
        entries = cb.entries.data if isinstance(cb, Codebook) else np.asarray(cb)
        idx = nearest_code(residual, entries)
        code = entries[idx]
        quantized = quantized + code
        residual = residual - code
        indices.append(idx)
        norms.append(np.linalg.norm(residual, axis=-1))
    return np.stack(indices), quantized, np.stack(norms)


def lookup(codebooks, indices: np.ndarray) -> Tensor:
    """Sum of the selected code vectors over layers (differentiable in the entries)."""
    out = None
    for cb, idx in zip(codebooks, indices):
        e = ad.embedding(cb.entries, idx)
        out = e if out is None else out + e
    return out


def tokenizer_loss(M, M_hat, z, z_q, beta: float = 0.25) -> Tensor:
    """Mean L1 reconstruction + codebook term + beta-weighted commitment term."""
    M, M_hat, z, z_q = (ad._as_tensor(t) for t in (M, M_hat, z, z_q))
    if M.shape != M_hat.shape or z.shape != z_q.shape:
        raise ad.ShapeError("tokenizer loss operands must match in shape")
    recon = ad.mean(ad.abs_(M - M_hat))
    codebook = ad.mean((ad.stop_gradient(z) - z_q) ** 2)
    commit = ad.mean((z - ad.stop_gradient(z_q)) ** 2)
    return recon + codebook + commit * beta


def perplexity(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(np.exp(-(p * np.log(p)).sum()))


def codebook_reset(codebooks, batch_latents, rng: np.random.Generator) -> int:
    """Re-seed entries never used during the last window from random batch latents.

    ``batch_latents[l]`` holds the vectors layer ``l`` was asked to quantise.
    Usage counters are cleared afterwards.  Returns how many entries were replaced.
    """
    replaced = 0
    for cb, lat in zip(codebooks, batch_latents):
        lat = np.asarray(lat, dtype=np.float32).reshape(-1, cb.entries.shape[1])
        dead = np.flatnonzero(cb.usage_count == 0)
        if len(dead) and len(lat):
            pick = rng.choice(len(lat), size=len(dead), replace=len(dead) > len(lat))
            data = cb.entries.data.copy()
            data[dead] = lat[pick]
            cb.entries.data = data
            replaced += len(dead)
        cb.usage_count[:] = 0
    return replaced


# ---------------------------------------------------------------- networks

class ResBlock(Module):
    def __init__(self, width: int, rng):
        self.conv1 = Conv1d(width, width, 3, rng)
        self.conv2 = Conv1d(width, width, 1, rng)
        self.conv2.weight.data *= 0.3

    def __call__(self, x):
        return x + self.conv2(ad.relu(self.conv1(ad.relu(x))))


class Encoder(Module):
    def __init__(self, dim: int, width: int, latent: int, rng):
        self.conv_in = Conv1d(dim, width, 3, rng)
        self.down1 = Conv1d(width, width, 4, rng, stride=2, padding=1)
        self.res1 = ResBlock(width, rng)
        self.down2 = Conv1d(width, width, 4, rng, stride=2, padding=1)
        self.res2 = ResBlock(width, rng)
        self.conv_out = Conv1d(width, latent, 3, rng)

    def __call__(self, x):
        h = ad.relu(self.conv_in(x))
        h = self.res1(ad.relu(self.down1(h)))
        h = self.res2(ad.relu(self.down2(h)))
        return self.conv_out(h)


class Decoder(Module):
    def __init__(self, dim: int, width: int, latent: int, rng):
        self.conv_in = Conv1d(latent, width, 3, rng)
        self.res1 = ResBlock(width, rng)
        self.up1 = Conv1d(width, width, 3, rng)
        self.res2 = ResBlock(width, rng)
        self.up2 = Conv1d(width, width, 3, rng)
        self.conv_out = Conv1d(width, dim, 3, rng)

    def __call__(self, z):
        h = self.res1(ad.relu(self.conv_in(z)))
        h = self.res2(ad.relu(self.up1(ad.repeat(h, 2, axis=1))))
        h = ad.relu(self.up2(ad.repeat(h, 2, axis=1)))
        return self.conv_out(h)


class TokenizerModel(Module):
    def __init__(self, dim: int = 41, width: int = 128, latent: int = 64, codes: int = 128,
                 layers: int = 2, downsample: int = 4, beta: float = 0.25, seed: int = 0):
        if downsample != 4:
            raise TokenizerError("the conv stack downsamples by exactly 4")
        rng = np.random.default_rng(seed)
        self.dim, self.latent, self.codes, self.n_layers = dim, latent, codes, layers
        self.downsample = downsample
        self.beta = beta
        self.encoder = Encoder(dim, width, latent, rng)
        self.decoder = Decoder(dim, width, latent, rng)
        self.codebooks = [Codebook(param(rng.normal(0, 0.1, size=(codes, latent))), l)
                          for l in range(layers)]
        self.entries = [cb.entries for cb in self.codebooks]
        self.feat_mean = buffer(np.zeros(dim))
        self.feat_std = buffer(np.ones(dim))
        self.trained_flag = buffer(np.zeros(1))

    # -- helpers
    @property
    def trained(self) -> bool:
        return bool(self.trained_flag.data[0] > 0)

    def _warn_untrained(self):
        if not self.trained:
            warnings.warn("tokenizer has not been trained; outputs are meaningless", RuntimeWarning,
                          stacklevel=3)

    def normalize(self, feats: np.ndarray) -> np.ndarray:
        return ((feats - self.feat_mean.data) / self.feat_std.data).astype(np.float32)

    def denormalize(self, x):
        if isinstance(x, Tensor):
            return x * self.feat_std.data + self.feat_mean.data
        return x * self.feat_std.data + self.feat_mean.data

    def pad_frames(self, feats: np.ndarray) -> np.ndarray:
        n = feats.shape[0]
        pad = (-n) % self.downsample
        if pad:
            feats = np.concatenate([feats, np.repeat(feats[-1:], pad, axis=0)], axis=0)
        return feats

    # -- core
    def encode_latent(self, x_norm):
        return self.encoder(x_norm)

    def decode_latent(self, z_q):
        """Normalised features from quantised latents (differentiable)."""
        return self.decoder(z_q)

    def code_vectors(self, indices: np.ndarray) -> np.ndarray:
        out = 0.0
        for cb, idx in zip(self.codebooks, indices):
            out = out + cb.entries.data[idx]
        return np.asarray(out, dtype=np.float32)

    def encode(self, seq: MotionSequence) -> TokenGrid:
        self._warn_untrained()
        feats = self.pad_frames(seq.features)
        z = self.encoder(Tensor(self.normalize(feats)[None])).data[0]
        idx, _, _ = quantize(z, self.codebooks)
        return TokenGrid(idx, frames=seq.frames, downsample=self.downsample)

    def decode(self, grid: TokenGrid, fps: int = 20) -> MotionSequence:
        self._warn_untrained()
        zq = self.code_vectors(grid.indices[: self.n_layers])
        return self.decode_vectors(zq, grid.frames, fps)

    def decode_vectors(self, zq: np.ndarray, frames: int | None = None, fps: int = 20) -> MotionSequence:
        out = self.decoder(Tensor(np.asarray(zq, dtype=np.float32)[None])).data[0]
        feats = self.denormalize(out)
        if frames is not None:
            feats = feats[:frames]
        feats = feats.copy()
        feats[:, -2:] = np.clip(feats[:, -2:], 0.0, 1.0)
        return MotionSequence(feats.astype(np.float32), fps)

    def forward_loss(self, x_norm: np.ndarray) -> tuple[Tensor, dict]:
        """Training objective for a batch (B, T, D) of normalised features."""
        z = self.encoder(Tensor(x_norm))
        idx, zq_np, _ = quantize(z.data, self.codebooks)
        for cb, i in zip(self.codebooks, idx):
            cb.usage_count += np.bincount(i.reshape(-1), minlength=cb.size)
        zq = lookup(self.codebooks, idx)
        z_st = z + ad.stop_gradient(zq - z)
        x_hat = self.decoder(z_st)
        loss = tokenizer_loss(Tensor(x_norm), x_hat, z, zq, self.beta)
        residuals = [z.data]
        for cb, i in zip(self.codebooks[:-1], idx[:-1]):
            residuals.append(residuals[-1] - cb.entries.data[i])
        return loss, {"residuals": residuals, "indices": idx}

    def init_codebooks(self, x_norm: np.ndarray, rng: np.random.Generator) -> None:
        """Seed every layer's entries from encoder outputs / residuals of a batch."""
        z = self.encoder(Tensor(x_norm)).data.reshape(-1, self.latent)
        residual = z
        for cb in self.codebooks:
            pick = rng.choice(len(residual), size=cb.size, replace=len(residual) < cb.size)
            cb.entries.data = residual[pick].astype(np.float32).copy()
            idx = nearest_code(residual, cb.entries.data)
            residual = residual - cb.entries.data[idx]
