"""Music/pose adapter towers, the residual-layer head, and the adapter training losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import BackboneError, MaskedTransformer, t2m_loss
from .layers import LayerNorm, Linear, Module, TransformerLayer, copy_module_params, param
from .metrics import NoConstraintError
from .motion import FPS, Skeleton


class AdapterConfigError(ValueError):
    pass


@dataclass(frozen=True)
class KinematicLossWeights:
    pos: float = 0.5
    vel: float = 0.1
    acc: float = 0.05
    foot: float = 0.1
    d: float = 1.0

    def __post_init__(self):
        for k in ("pos", "vel", "acc", "foot", "d"):
            v = getattr(self, k)
            if not (np.isfinite(v) and v >= 0):
                raise AdapterConfigError(f"loss weight {k} must be finite and non-negative")


# ---------------------------------------------------------------- condition pooling

def pool_frames(frame_features: np.ndarray, downsample: int = 4) -> np.ndarray:
    """Average every ``downsample`` frames (last frame repeated to pad) -> n x F."""
    f = np.asarray(frame_features, dtype=np.float32)
    pad = (-len(f)) % downsample
    if pad:
        f = np.concatenate([f, np.repeat(f[-1:], pad, axis=0)], axis=0)
    return f.reshape(-1, downsample, f.shape[1]).mean(axis=1)


# ---------------------------------------------------------------- differentiable kinematics

def positions_from_features(feats: Tensor, joint_count: int, fps: int = FPS) -> Tensor:
    """Global joint positions (B, T, J, 3) from raw features (B, T, D), differentiably.

    Same convention as ``motion.joint_positions``: root xy integrates the per-second
    velocity from the origin, root z is the stored height, children are root-relative.
    """
    B, T, D = feats.shape
    if D != 3 + 3 * (joint_count - 1) + 2:
        raise ad.ShapeError(f"feature width {D} does not fit {joint_count} joints")
    xy = ad.cumsum(feats[:, :, 0:2], axis=1) * (1.0 / fps)
    root = ad.concat([xy, feats[:, :, 2:3]], axis=2).reshape(B, T, 1, 3)
    local = feats[:, :, 3:3 + 3 * (joint_count - 1)].reshape(B, T, joint_count - 1, 3)
    return ad.concat([root, root + local], axis=2)


def _diff(x: Tensor, fps: int) -> Tensor:
    return (x[:, 1:] - x[:, :-1]) * float(fps)


def _frame_sq_error(a: Tensor, b) -> Tensor:
    """Squared error summed over joints and coordinates, averaged over batch and frames."""
    d = a - b
    return ad.mean(ad.sum_(d * d, axis=(2, 3)))


def position_loss(pred: Tensor, gt) -> Tensor:
    return _frame_sq_error(pred, gt)


def velocity_loss(pred: Tensor, gt, fps: int = FPS) -> Tensor:
    gt = ad._as_tensor(gt)
    return _frame_sq_error(_diff(pred, fps), _diff(gt, fps))


def acceleration_loss(pred: Tensor, gt, fps: int = FPS) -> Tensor:
    gt = ad._as_tensor(gt)
    return _frame_sq_error(_diff(_diff(pred, fps), fps), _diff(_diff(gt, fps), fps))


def foot_static_mask(gt_pos: np.ndarray, foot_joints, fps: int = FPS, threshold: float = 0.01) -> np.ndarray:
    """(B, T-1, F) flags: ground-truth foot speed (m/s) below ``threshold``."""
    feet = np.asarray(gt_pos)[:, :, list(foot_joints)]
    speed = np.linalg.norm(np.diff(feet, axis=1), axis=-1) * fps
    return speed < threshold


def foot_loss(pred: Tensor, gt, foot_joints, fps: int = FPS, threshold: float = 0.01) -> Tensor:
    """L1 of (predicted foot at k+1 minus ground-truth foot at k) on static frames."""
    gt = ad._as_tensor(gt)
    feet = list(foot_joints)
    static = foot_static_mask(gt.data, feet, fps, threshold)[..., None].astype(np.float32)
    diff = pred[:, 1:, feet] - gt[:, :-1, feet]
    per_frame = ad.sum_(ad.abs_(diff * static), axis=(2, 3))
    return ad.mean(per_frame)


def kinematic_losses(pred: Tensor, gt, skeleton: Skeleton, fps: int = FPS, threshold: float = 0.01) -> dict:
    if skeleton is None:
        raise AdapterConfigError("kinematic losses need a skeleton")
    gt = ad._as_tensor(gt)
    return {
        "pos": position_loss(pred, gt),
        "vel": velocity_loss(pred, gt, fps),
        "acc": acceleration_loss(pred, gt, fps),
        "foot": foot_loss(pred, gt, skeleton.foot_joints, fps, threshold),
    }


def pose_discrepancy(target, predicted: Tensor, validity) -> Tensor:
    """Squared position error summed over valid (frame, joint) entries / number of valid entries."""
    valid = np.asarray(validity, dtype=np.float32)
    count = float(valid.sum())
    if count == 0:
        raise NoConstraintError("constraint has no valid entries")
    target = np.asarray(target, dtype=np.float32)
    d = (predicted - target) * valid[..., None]
    return ad.sum_(d * d) * (1.0 / count)


def music_adapter_loss(logits, targets, mask, sampled_pos, gt_pos, weights: KinematicLossWeights,
                       skeleton: Skeleton | None, fps: int = FPS, threshold: float = 0.01,
                       unmask_weight: float = 0.0):
    """Masked-token cross-entropy plus weighted kinematic terms. Returns (total, parts)."""
    if skeleton is None:
        raise AdapterConfigError("music adapter loss needs a skeleton")
    ce = t2m_loss(logits, targets, mask, unmask_weight=unmask_weight)
    parts = kinematic_losses(sampled_pos, gt_pos, skeleton, fps, threshold)
    total = ce + parts["pos"] * weights.pos + parts["vel"] * weights.vel \
        + parts["acc"] * weights.acc + parts["foot"] * weights.foot
    parts["ce"] = ce
    return total, parts


def pose_adapter_loss(logits, targets, mask, P, P_hat, validity, lambda_d: float = 1.0,
                      unmask_weight: float = 0.0):
    """Masked-token cross-entropy plus ``lambda_d`` times the pose discrepancy."""
    ce = t2m_loss(logits, targets, mask, unmask_weight=unmask_weight)
    d = pose_discrepancy(P, P_hat, validity)
    return ce + d * lambda_d, {"ce": ce, "d": d}


# ---------------------------------------------------------------- towers

class AdapterTower(Module):
    """Trainable copy of the backbone layers driven by an extra per-token condition.

    Every layer output leaves through a zero-initialised bridge and is added to the
    input of the matching backbone layer.
    """

    def __init__(self, backbone: MaskedTransformer, cond_dim: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        w = backbone.width
        self.cond_dim = cond_dim
        self.depth = backbone.depth
        self.cond_proj = Linear(cond_dim, w, rng, std=0.02)
        heads = backbone.layers[0].attn.heads
        self.layers = [TransformerLayer(w, heads, rng) for _ in range(backbone.depth)]
        for src, dst in zip(backbone.layers, self.layers):
            copy_module_params(src, dst)
        self.bridges = [Linear(w, w, rng, zero=True) for _ in range(backbone.depth)]

    def injections(self, backbone: MaskedTransformer, ids, genre, cond: np.ndarray) -> list[Tensor]:
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        cond = np.asarray(cond, dtype=np.float32)
        if cond.ndim == 2:
            cond = np.broadcast_to(cond, (ids.shape[0],) + cond.shape)
        if cond.shape[:2] != ids.shape or cond.shape[2] != self.cond_dim:
            raise AdapterConfigError(f"condition shape {cond.shape} does not fit ids {ids.shape}")
        x, key_bias = backbone.embed(ids, genre)
        c = self.cond_proj(Tensor(cond))
        zero = Tensor(np.zeros((c.shape[0], 1, c.shape[2]), dtype=np.float32))
        h = x + ad.concat([zero, c], axis=1)
        out = []
        for layer, bridge in zip(self.layers, self.bridges):
            h = layer(h, key_bias)
            out.append(bridge(h)[:, 1:])
        return out


def attach_forward(backbone: MaskedTransformer, towers, ids, genre=None) -> Tensor:
    """Backbone logits with zero or more ``(tower, condition)`` pairs attached."""
    injections = None
    for tower, cond in towers:
        if tower.depth != backbone.depth:
            raise AdapterConfigError("tower depth differs from backbone depth")
        inj = tower.injections(backbone, ids, genre, cond)
        injections = inj if injections is None else [a + b for a, b in zip(injections, inj)]
    return backbone.forward_logits(ids, genre, injections)


# ---------------------------------------------------------------- residual head

class ResidualHead(Module):
    """Predicts quantizer layer ``q`` tokens from the summed embeddings of layers below it.

    Genre is prepended as a token; pooled music features, when given, are added per position.
    """

    def __init__(self, codes: int, genres: int, quant_layers: int = 2, music_dim: int = 8, width: int = 64,
                 heads: int = 4, depth: int = 2, max_tokens: int = 64, seed: int = 0):
        if quant_layers < 2:
            raise AdapterConfigError("residual head needs at least two quantizer layers")
        rng = np.random.default_rng(seed)
        self.codes, self.n_genres, self.quant_layers, self.max_tokens = codes, genres, quant_layers, max_tokens
        self.music_dim = music_dim
        self.tok_emb = [param(rng.normal(0, 0.02, size=(codes, width))) for _ in range(quant_layers - 1)]
        self.layer_emb = param(rng.normal(0, 0.02, size=(quant_layers, width)))
        self.pos_emb = param(rng.normal(0, 0.02, size=(max_tokens + 1, width)))
        self.genre_emb = param(rng.normal(0, 0.02, size=(genres + 1, width)))
        self.music_proj = Linear(music_dim, width, rng, std=0.02)
        self.layers = [TransformerLayer(width, heads, rng) for _ in range(depth)]
        self.ln_f = LayerNorm(width)
        self.head = Linear(width, codes, rng, std=0.02)

    @property
    def null_genre(self) -> int:
        return self.n_genres

    def forward_logits(self, lower_ids, q: int, genre=None, music=None) -> Tensor:
        """``lower_ids`` is (B, q, n) (or (q, n)) holding the tokens of layers ``0..q-1``."""
        lower = np.asarray(lower_ids, dtype=np.int64)
        if lower.ndim == 2:
            lower = lower[None]
        B, ql, n = lower.shape
        if not 1 <= q < self.quant_layers or ql < q:
            raise AdapterConfigError(f"cannot predict layer {q} from {ql} lower layers")
        if n > self.max_tokens:
            raise BackboneError(f"sequence of {n} tokens exceeds max_tokens={self.max_tokens}")
        if genre is None:
            g = np.full(B, self.null_genre, dtype=np.int64)
        else:
            g = np.broadcast_to(np.asarray(genre, dtype=np.int64), (B,)).copy()
            g[g < 0] = self.null_genre
        x = None
        for l in range(q):
            e = ad.embedding(self.tok_emb[l], lower[:, l])
            x = e if x is None else x + e
        x = x + self.layer_emb[q]
        if music is not None:
            m = np.asarray(music, dtype=np.float32)
            if m.ndim == 2:
                m = np.broadcast_to(m, (B,) + m.shape)
            x = x + self.music_proj(Tensor(m))
        gen = ad.embedding(self.genre_emb, g[:, None])
        h = ad.concat([gen, x], axis=1) + self.pos_emb[: n + 1]
        for layer in self.layers:
            h = layer(h)
        return self.head(self.ln_f(h))[:, 1:]
