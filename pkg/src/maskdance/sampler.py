"""Inference: guidance fusion, confidence-based parallel decoding, token optimisation and editing."""
from __future__ import annotations

import csv
import io
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .adapters import attach_forward, pool_frames, pose_discrepancy, positions_from_features
from .autodiff import Tensor
from .backbone import remask_count
from .metrics import NoConstraintError, joint_distance
from .models import ModelSet
from .motion import BeatTrack, MotionError, MotionSequence, PoseConstraint, joint_positions
from .tokenizer import TokenGrid, quantize
from .training import pose_condition


class SamplerError(ValueError):
    pass


@dataclass
class GuidanceBundle:
    genre: int | None = None
    music: BeatTrack | None = None
    pose: PoseConstraint | None = None
    w_u: float = 0.0
    w_t: float = 4.0
    w_a: float = 1.0
    w_p: float = 1.0
    unconditional: bool = False
    mode: str = "delta"

    def __post_init__(self):
        if self.genre is None and self.music is None and self.pose is None and not self.unconditional:
            raise SamplerError("guidance needs a genre, music, pose, or the unconditional flag")
        if self.mode not in ("delta", "linear"):
            raise SamplerError("mode must be 'delta' or 'linear'")

    @classmethod
    def from_config(cls, cfg, **kw) -> "GuidanceBundle":
        base = dict(w_u=cfg.w_u, w_t=cfg.w_t, w_a=cfg.w_a, w_p=cfg.w_p, mode=cfg.cfg_mode)
        base.update(kw)
        return cls(**base)


@dataclass
class DecodeTrace:
    """Per decoding step: the probability of each position's current token and what got committed."""

    confidences: list = field(default_factory=list)
    committed: list = field(default_factory=list)

    def add(self, conf: np.ndarray, committed: np.ndarray) -> None:
        self.confidences.append(np.asarray(conf, dtype=np.float64))
        self.committed.append(np.asarray(sorted(committed), dtype=np.int64))

    @property
    def steps(self) -> int:
        return len(self.confidences)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "position", "confidence", "committed"])
        for s, (conf, com) in enumerate(zip(self.confidences, self.committed)):
            flags = np.zeros(len(conf), dtype=int)
            flags[com] = 1
            for p, (c, f) in enumerate(zip(conf, flags)):
                w.writerow([s, p, f"{c:.8f}", f])
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())


# ---------------------------------------------------------------- guidance

def cfg_fuse(l_uncond, l_t=None, l_a=None, l_p=None, w_t: float = 4.0, w_a: float = 1.0, w_p: float = 1.0,
             w_u: float = 0.0, mode: str = "delta") -> np.ndarray:
    """Combine per-condition logits.

    ``delta``: l_u + sum_m w_m (l_m - l_u).  ``linear``: (1 - w_u) l_u + sum_m w_m l_m.
    Both are evaluated as a weighted sum so that degenerate weights reproduce an input exactly.
    """
    base = np.asarray(l_uncond)
    terms = []
    for lg, w in ((l_t, w_t), (l_a, w_a), (l_p, w_p)):
        if lg is None:
            continue
        lg = np.asarray(lg)
        if lg.shape != base.shape:
            raise SamplerError(f"logit shapes differ: {lg.shape} vs {base.shape}")
        terms.append((lg, float(w)))
    if mode == "delta":
        coef = 1.0 - sum(w for _, w in terms)
    elif mode == "linear":
        coef = 1.0 - float(w_u)
    else:
        raise SamplerError("mode must be 'delta' or 'linear'")
    out = coef * base.astype(np.float64)
    for lg, w in terms:
        out = out + w * lg.astype(np.float64)
    return out.astype(base.dtype)


@dataclass
class _Conditions:
    genre: int | None
    music: np.ndarray | None   # n x F_m pooled
    pose: np.ndarray | None    # n x 4J pooled
    bundle: GuidanceBundle

    def window(self, start: int, stop: int) -> "_Conditions":
        return _Conditions(self.genre, None if self.music is None else self.music[start:stop],
                           None if self.pose is None else self.pose[start:stop], self.bundle)


def _conditions(models: ModelSet, bundle: GuidanceBundle, L: int) -> _Conditions:
    ds = models.tokenizer.downsample
    music = pose = None
    if bundle.music is not None:
        if models.music is None:
            raise SamplerError("music guidance requested but the model set has no music adapter")
        if bundle.music.frames < L * ds:
            raise SamplerError(f"beat track has {bundle.music.frames} frames, need {L * ds}")
        music = pool_frames(bundle.music.features[: L * ds], ds)
    if bundle.pose is not None:
        if models.pose is None:
            raise SamplerError("pose guidance requested but the model set has no pose adapter")
        if bundle.pose.count == 0:
            raise NoConstraintError("pose constraint has no valid entries")
        pose = pose_condition(bundle.pose.positions, bundle.pose.validity, ds)[:L]
        if len(pose) < L:
            raise SamplerError("pose constraint shorter than the requested length")
    return _Conditions(bundle.genre, music, pose, bundle)


def _fused_logits(models: ModelSet, ids: np.ndarray, conds: _Conditions) -> np.ndarray:
    t2m = models.t2m
    b = conds.bundle
    genre_rows = [-1] + ([conds.genre] if conds.genre is not None else [])
    base = t2m.forward_logits(np.repeat(ids[None], len(genre_rows), 0), np.array(genre_rows)).data
    l_u = base[0]
    l_t = base[1] if conds.genre is not None else None
    l_a = l_p = None
    if conds.music is not None:
        l_a = attach_forward(t2m, [(models.music, conds.music)], ids[None], -1).data[0]
    if conds.pose is not None:
        l_p = attach_forward(t2m, [(models.pose, conds.pose)], ids[None], -1).data[0]
    return cfg_fuse(l_u, l_t, l_a, l_p, b.w_t, b.w_a, b.w_p, b.w_u, b.mode)


def _probs(logits: np.ndarray, temperature: float) -> np.ndarray:
    x = logits.astype(np.float64) / temperature
    x = x - x.max(axis=-1, keepdims=True)
    p = np.exp(x)
    return p / p.sum(axis=-1, keepdims=True)


def _sample(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row by inverse CDF."""
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(len(p))[:, None] * cdf[:, -1:]
    return np.minimum((cdf <= u).sum(axis=-1), p.shape[-1] - 1)


def decode_base(models: ModelSet, conds: _Conditions, ids: np.ndarray, todo: np.ndarray, steps: int,
                temperature: float, rng: np.random.Generator):
    """Fill the base-layer positions flagged in ``todo`` by confidence-ordered parallel decoding."""
    ids = np.asarray(ids, dtype=np.int64).copy()
    todo = np.asarray(todo, dtype=bool)
    mask_id = models.t2m.mask_id
    ids[todo] = mask_id
    total = int(todo.sum())
    trace = DecodeTrace()
    if total == 0:
        return ids, trace
    if steps < 1:
        raise SamplerError("need at least one decoding step")
    for t in range(steps):
        masked = np.flatnonzero(ids == mask_id)
        if len(masked) == 0:
            break
        p = _probs(_fused_logits(models, ids, conds), temperature)
        sampled = _sample(p[masked], rng)
        conf_masked = p[masked, sampled]
        keep_masked = remask_count(total, t + 1, steps)
        n_commit = len(masked) - keep_masked
        order = np.lexsort((masked, -conf_masked))
        chosen = order[:n_commit]
        ids[masked[chosen]] = sampled[chosen]
        conf = p[np.arange(len(ids)), np.where(ids == mask_id, 0, ids)]
        conf[masked] = conf_masked
        trace.add(conf, masked[chosen])
    return ids, trace


def decode_residual(models: ModelSet, conds: _Conditions, grid_ids: np.ndarray, todo: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
    """Fill residual layers (one pass per layer) at positions flagged in ``todo``."""
    cfg = models.config
    out = np.asarray(grid_ids, dtype=np.int64).copy()
    music = conds.music if cfg.residual_music else None
    for q in range(1, models.tokenizer.n_layers):
        lower = out[None, :q]
        l_u = models.residual.forward_logits(lower, q, None, None).data[0]
        if conds.genre is not None or music is not None:
            l_c = models.residual.forward_logits(lower, q, conds.genre, music).data[0]
            logits = cfg_fuse(l_u, l_c, w_t=cfg.w_r)
        else:
            logits = l_u
        sampled = _sample(_probs(logits, cfg.residual_temperature), rng)
        out[q, todo] = sampled[todo]
    return out


def parallel_decode(models: ModelSet, bundle: GuidanceBundle, L: int, steps: int | None = None,
                    temperature: float | None = None, rng: np.random.Generator | None = None,
                    init: TokenGrid | None = None, todo: np.ndarray | None = None):
    """Generate (or complete) a token grid. Returns ``(TokenGrid, DecodeTrace)``.

    With ``init`` and ``todo``, only the flagged positions are regenerated; the rest keep
    the tokens of ``init`` on every layer.
    """
    cfg = models.config
    steps = cfg.steps if steps is None else steps
    temperature = cfg.temperature if temperature is None else temperature
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    if L < 1:
        raise SamplerError("L must be at least 1")
    if L > models.t2m.max_tokens:
        raise SamplerError(f"L={L} exceeds the model's max_tokens={models.t2m.max_tokens}")
    Q = models.tokenizer.n_layers
    if init is None:
        grid_ids = np.zeros((Q, L), dtype=np.int64)
        todo = np.ones(L, dtype=bool)
    else:
        if init.length != L:
            raise SamplerError("init grid length differs from L")
        grid_ids = init.indices.copy()
        todo = np.ones(L, dtype=bool) if todo is None else np.asarray(todo, dtype=bool)
    conds = _conditions(models, bundle, L)
    base, trace = decode_base(models, conds, grid_ids[0], todo, steps, temperature, rng)
    grid_ids[0] = base
    if todo.any():
        grid_ids = decode_residual(models, conds, grid_ids, todo, rng)
    frames = init.frames if init is not None else L * models.tokenizer.downsample
    return TokenGrid(grid_ids, mask=np.zeros(L, bool), frames=frames,
                     downsample=models.tokenizer.downsample), trace


def generate(models: ModelSet, bundle: GuidanceBundle, frames: int, rng=None, steps=None, temperature=None):
    ds = models.tokenizer.downsample
    L = -(-frames // ds)
    grid, trace = parallel_decode(models, bundle, L, steps, temperature, rng)
    grid.frames = frames
    return models.tokenizer.decode(grid, models.fps), grid, trace


# ---------------------------------------------------------------- inference-time token optimisation

def optimize_embeddings(z0: np.ndarray, positions_fn, target: np.ndarray, validity: np.ndarray, lr: float,
                        iters: int, optimizer: str = "sgd", project=None):
    """Gradient descent on continuous token embeddings to reduce the pose discrepancy.

    ``positions_fn`` maps an embedding Tensor to joint positions (N x J x 3).
    With ``project`` (array -> array) the forward pass sees ``project(z)`` while the
    gradient passes straight through to ``z``, and the iterate with the lowest projected
    discrepancy is returned. Returns ``(z, history)`` with ``history[i]`` the discrepancy
    before update ``i`` (plus the final value).
    """
    if not lr > 0:
        raise SamplerError("learning rate must be positive")
    if np.asarray(validity).sum() == 0:
        raise NoConstraintError("constraint has no valid entries")
    if optimizer not in ("sgd", "adam"):
        raise SamplerError(f"unknown optimizer {optimizer!r}")

    def forward(z):
        if project is None:
            return z
        return z + Tensor(np.asarray(project(z.data), dtype=np.float32) - z.data)

    z = Tensor(np.asarray(z0, dtype=np.float32).copy(), requires_grad=True)
    m = np.zeros_like(z.data)
    v = np.zeros_like(z.data)
    history = []
    best_d, best_z = np.inf, z.data.copy()
    for it in range(iters):
        with ad.Tape() as tape:
            d = pose_discrepancy(target, positions_fn(forward(z)), validity)
        history.append(d.item())
        if history[-1] < best_d:
            best_d, best_z = history[-1], z.data.copy()
        z.grad = None
        tape.backward(d)
        g = z.grad
        if optimizer == "sgd":
            step = lr * g
        else:
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            step = lr * (m / (1 - 0.9 ** (it + 1))) / (np.sqrt(v / (1 - 0.999 ** (it + 1))) + 1e-8)
        z.data = (z.data - step).astype(np.float32)
    history.append(pose_discrepancy(target, positions_fn(forward(Tensor(z.data))), validity).item())
    if project is None or history[-1] < best_d:
        return z.data, history
    return best_z, history


@contextmanager
def _frozen(*modules):
    flags = [[p.requires_grad for p in m.parameters()] for m in modules]
    for m in modules:
        m.freeze()
    try:
        yield
    finally:
        for m, fl in zip(modules, flags):
            for p, f in zip(m.parameters(), fl):
                p.requires_grad = f


def _grid_positions(models: ModelSet, grid: TokenGrid) -> np.ndarray:
    return joint_positions(models.tokenizer.decode(grid, models.fps), models.skeleton)


def itto(models: ModelSet, grid: TokenGrid, constraint: PoseConstraint, lr: float | None = None,
         iters: int | None = None, optimizer: str | None = None):
    """Refine a grid so its decoded motion better meets ``constraint``; models stay untouched.

    The relaxation is the grid's summed code vectors (n x d). Each forward pass decodes their
    residual nearest-code quantisation, with gradients passed straight through to the
    continuous vectors, so the optimiser works on the discrete grid it will return.
    Returns ``(grid, info)``.
    """
    cfg = models.config
    lr = cfg.itto_lr if lr is None else lr
    iters = cfg.itto_iters if iters is None else iters
    optimizer = cfg.itto_optimizer if optimizer is None else optimizer
    if constraint.count == 0:
        raise NoConstraintError("constraint has no valid entries")
    if constraint.frames != grid.frames:
        raise MotionError("constraint and grid differ in frame count")
    tok = models.tokenizer
    J = models.skeleton.joint_count

    def positions_fn(z):
        feats = tok.denormalize(tok.decode_latent(z.reshape(1, *z.shape)))
        return positions_from_features(feats, J, models.fps)[0, : grid.frames]

    before = float(pose_discrepancy(constraint.positions, Tensor(_grid_positions(models, grid)),
                                    constraint.validity).item())
    with _frozen(tok, models.t2m, models.residual):
        z0 = tok.code_vectors(grid.indices)
        z, history = optimize_embeddings(z0, positions_fn, constraint.positions, constraint.validity, lr,
                                         iters, optimizer, project=lambda x: quantize(x, tok.codebooks)[1])
    if np.array_equal(z, z0):
        # nothing moved; re-quantising the summed codes could still swap entries
        idx = grid.indices.copy()
    else:
        idx, _, _ = quantize(z, tok.codebooks)
    refined = TokenGrid(idx, frames=grid.frames, downsample=grid.downsample)
    after = float(pose_discrepancy(constraint.positions, Tensor(_grid_positions(models, refined)),
                                   constraint.validity).item())
    kept = after <= before
    info = {"d_before": before, "d_after": after if kept else before, "d_history_min": min(history),
            "history": history, "accepted": kept}
    return (refined if kept else grid.copy()), info


# ---------------------------------------------------------------- editing

def edit_spatial(models: ModelSet, motion: MotionSequence, constraint: PoseConstraint, bundle: GuidanceBundle,
                 rng: np.random.Generator | None = None, use_itto: bool = True):
    """Regenerate a motion while pinning the joints marked valid in ``constraint``."""
    if constraint.frames != motion.frames:
        raise MotionError("constraint frame count differs from motion")
    if constraint.count == 0:
        raise NoConstraintError("constraint marks no joint to preserve")
    tok = models.tokenizer
    grid = tok.encode(motion)
    if constraint.validity.all():
        out = tok.decode(grid, models.fps)
        d = joint_distance(constraint, out, models.skeleton)
        return out, {"joint_dist_pre": d, "joint_dist_post": d}
    pose_bundle = GuidanceBundle(bundle.genre, bundle.music, constraint, bundle.w_u, bundle.w_t, bundle.w_a,
                                 bundle.w_p, bundle.unconditional, bundle.mode)
    new_grid, _ = parallel_decode(models, pose_bundle, grid.length, rng=rng, init=grid,
                                  todo=np.ones(grid.length, bool))
    pre = joint_distance(constraint, tok.decode(new_grid, models.fps), models.skeleton)
    info = {"joint_dist_pre": pre, "joint_dist_post": pre}
    if use_itto:
        new_grid, itto_info = itto(models, new_grid, constraint)
        info["joint_dist_post"] = itto_info["d_after"]
    out = tok.decode(new_grid, models.fps)
    return out, info


def keep_token_mask(frames: int, keep_ranges, downsample: int = 4) -> np.ndarray:
    """Tokens overlapping any ``[start, stop)`` frame range are kept."""
    n = -(-frames // downsample)
    keep = np.zeros(n, dtype=bool)
    prev_stop = -1
    for r in sorted((tuple(r) for r in keep_ranges)):
        if len(r) != 2:
            raise SamplerError(f"keep range {r} must be (start, stop)")
        start, stop = int(r[0]), int(r[1])
        if not 0 <= start < stop <= frames:
            raise SamplerError(f"keep range {r} outside [0, {frames}]")
        if start < prev_stop:
            raise SamplerError("keep ranges overlap")
        prev_stop = stop
        keep[start // downsample: -(-stop // downsample)] = True
    return keep


def edit_temporal(models: ModelSet, motion: MotionSequence, keep_ranges, bundle: GuidanceBundle,
                  rng: np.random.Generator | None = None):
    """Keep the tokens covering ``keep_ranges`` (frames) and regenerate everything else."""
    tok = models.tokenizer
    keep = keep_token_mask(motion.frames, keep_ranges, tok.downsample)
    grid = tok.encode(motion)
    new_grid, trace = parallel_decode(models, bundle, grid.length, rng=rng, init=grid, todo=~keep)
    return tok.decode(new_grid, models.fps), new_grid, trace


def generate_long(models: ModelSet, bundles, frames, overlap_tokens: int = 4,
                  rng: np.random.Generator | None = None):
    """Generate segments independently, then regenerate the token window around each junction.

    ``frames`` is one length per segment (or a single length for all). The inner half of a
    window of ``overlap_tokens`` tokens on each side of a junction is re-decoded with both
    neighbours as context. Returns ``(motion, grid)``.
    """
    bundles = list(bundles)
    if not bundles:
        raise SamplerError("need at least one segment")
    if overlap_tokens < 1:
        raise SamplerError("overlap_tokens must be at least 1")
    rng = np.random.default_rng(models.config.seed) if rng is None else rng
    ds = models.tokenizer.downsample
    frames = [int(frames)] * len(bundles) if np.isscalar(frames) else [int(f) for f in frames]
    if len(frames) != len(bundles):
        raise SamplerError("one frame count per segment")
    if any(f % ds for f in frames):
        raise SamplerError(f"segment lengths must be multiples of {ds} frames")
    lengths = [f // ds for f in frames]
    if len(bundles) > 1 and min(lengths) < 2 * overlap_tokens:
        raise SamplerError("segment shorter than twice the overlap")
    grids, conds = [], []
    for b, L in zip(bundles, lengths):
        g, _ = parallel_decode(models, b, L, rng=rng)
        grids.append(g.indices)
        conds.append(_conditions(models, b, L))
    ids = np.concatenate(grids, axis=1)
    if len(bundles) > 1:
        half = max(1, overlap_tokens // 2)
        start = 0
        for i in range(len(bundles) - 1):
            start += lengths[i]
            lo, hi = start - overlap_tokens, start + overlap_tokens
            left, right = conds[i], conds[i + 1]
            music = None
            if left.music is not None and right.music is not None:
                music = np.concatenate([left.music[lengths[i] - overlap_tokens:], right.music[:overlap_tokens]])
            window_conds = _Conditions(left.genre, music, None, left.bundle)
            todo = np.zeros(hi - lo, dtype=bool)
            todo[overlap_tokens - half: overlap_tokens + half] = True
            window = ids[:, lo:hi].copy()
            base, _ = decode_base(models, window_conds, window[0], todo, models.config.steps,
                                  models.config.temperature, rng)
            window[0] = base
            window = decode_residual(models, window_conds, window, todo, rng)
            ids[:, lo:hi] = window
    grid = TokenGrid(ids, frames=sum(frames), downsample=ds)
    return models.tokenizer.decode(grid, models.fps), grid
