"""Corpus handling and the staged training procedure (tokenizer -> t2m -> music / pose adapters)."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .adapters import (KinematicLossWeights, attach_forward, music_adapter_loss, pool_frames,
                       pose_adapter_loss, positions_from_features)
from .autodiff import Tensor
from .backbone import t2m_loss, training_mask
from .config import Config
from .models import STAGES, ModelSet, PrerequisiteError
from .motion import (BeatTrack, MotionError, MotionSequence, joint_positions, mpjpe, read_beats,
                     read_motion, synth_corpus, write_beats, write_motion)
from .tokenizer import codebook_reset

PREREQUISITES = {"tokenizer": (), "t2m": ("tokenizer",), "music": ("tokenizer", "t2m"),
                 "pose": ("tokenizer", "t2m")}


class DataError(ValueError):
    pass


# ---------------------------------------------------------------- corpus

@dataclass
class Corpus:
    motions: list
    beats: list
    genres: np.ndarray
    names: list
    genre_names: tuple

    def __post_init__(self):
        self.genres = np.asarray(self.genres, dtype=np.int64)
        if not (len(self.motions) == len(self.beats) == len(self.genres) == len(self.names)):
            raise DataError("corpus lists differ in length")
        if not self.motions:
            raise DataError("corpus is empty")

    def __len__(self):
        return len(self.motions)

    def split(self, holdout_every: int = 8):
        """Indices of training and held-out clips (every ``holdout_every``-th clip is held out)."""
        idx = np.arange(len(self))
        held = idx % holdout_every == holdout_every - 1
        return idx[~held], idx[held]

    @classmethod
    def synthesize(cls, seed: int, genres, clips_per_genre: int, clip_seconds: float = 8.0, fps: int = 20):
        motions, beats, ids = synth_corpus(seed, genres, clips_per_genre, clip_seconds, fps)
        names = [f"{genres[g]}_{i % clips_per_genre:03d}" for i, g in enumerate(ids)]
        return cls(motions, beats, ids, names, tuple(genres))

    def save(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "manifest.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["clip", "genre", "tempo", "frames"])
            for name, m, b, g in zip(self.names, self.motions, self.beats, self.genres):
                write_motion(os.path.join(out_dir, name + ".motion"), m)
                write_beats(os.path.join(out_dir, name + ".beats"), b)
                w.writerow([name, self.genre_names[g], f"{b.tempo:.6f}", m.frames])

    @classmethod
    def load(cls, data_dir, genre_names=None) -> "Corpus":
        path = os.path.join(data_dir, "manifest.csv")
        if not os.path.exists(path):
            raise DataError(f"no manifest.csv in {data_dir}")
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise DataError("manifest lists no clips")
        if genre_names is None:
            genre_names = tuple(dict.fromkeys(r["genre"] for r in rows))
        genre_names = tuple(genre_names)
        motions, beats, ids, names = [], [], [], []
        for r in rows:
            if r["genre"] not in genre_names:
                raise DataError(f"clip {r['clip']} has genre {r['genre']!r} outside {genre_names}")
            try:
                motions.append(read_motion(os.path.join(data_dir, r["clip"] + ".motion")))
                beats.append(read_beats(os.path.join(data_dir, r["clip"] + ".beats")))
            except (OSError, MotionError) as e:
                raise DataError(f"cannot read clip {r['clip']}: {e}") from None
            ids.append(genre_names.index(r["genre"]))
            names.append(r["clip"])
        return cls(motions, beats, ids, names, genre_names)


# ---------------------------------------------------------------- token-level dataset

@dataclass
class TokenDataset:
    """Frame-shifted variants (offsets 0..3) of every clip, tokenised with a frozen tokenizer."""

    clip: np.ndarray       # (V,) source clip index
    genre: np.ndarray      # (V,)
    grids: np.ndarray      # (V, Q, n)
    music: np.ndarray      # (V, n, F_m) pooled beat features
    positions: np.ndarray  # (V, 4n, J, 3) ground-truth joint positions

    @property
    def length(self) -> int:
        return self.grids.shape[2]


def _pad_to(x: np.ndarray, frames: int) -> np.ndarray:
    if len(x) >= frames:
        return x[:frames]
    return np.concatenate([x, np.repeat(x[-1:], frames - len(x), axis=0)], axis=0)


def build_token_dataset(models: ModelSet, corpus: Corpus, indices, offsets=(0, 1, 2, 3)) -> TokenDataset:
    tok = models.tokenizer
    ds = tok.downsample
    lengths = {corpus.motions[i].frames for i in indices}
    if len(lengths) != 1:
        raise DataError("token dataset needs clips of equal length")
    frames = -(-lengths.pop() // ds) * ds
    clip, genre, grids, music, pos = [], [], [], [], []
    for i in indices:
        m, b = corpus.motions[i], corpus.beats[i]
        for o in offsets:
            feats = _pad_to(m.features[o:], frames)
            seq = MotionSequence(feats, m.fps)
            grids.append(tok.encode(seq).indices)
            music.append(pool_frames(_pad_to(b.features[o:], frames), ds))
            pos.append(joint_positions(seq, models.skeleton).astype(np.float32))
            clip.append(i)
            genre.append(corpus.genres[i])
    return TokenDataset(np.array(clip), np.array(genre), np.stack(grids), np.stack(music), np.stack(pos))


def sample_training_constraint(positions: np.ndarray, rng: np.random.Generator, joint_range=(1, 4),
                               frame_fraction=(0.1, 0.5)):
    """Random sparse pose constraint: 1-4 joints valid on 10-50% of the frames.

    Returns ``(P, validity)`` with invalid entries zeroed.
    """
    T, J, _ = positions.shape
    k = int(rng.integers(joint_range[0], joint_range[1] + 1))
    joints = rng.choice(J, size=k, replace=False)
    frac = rng.uniform(*frame_fraction)
    nf = int(np.clip(round(frac * T), 1, T))
    frames = rng.choice(T, size=nf, replace=False)
    valid = np.zeros((T, J), dtype=bool)
    valid[np.ix_(frames, joints)] = True
    return np.where(valid[..., None], positions, 0.0).astype(np.float32), valid


def pose_condition(P: np.ndarray, validity: np.ndarray, downsample: int = 4) -> np.ndarray:
    T = P.shape[0]
    feats = np.concatenate([P.reshape(T, -1), validity.astype(np.float32)], axis=1)
    return pool_frames(feats, downsample)


def _batch_masks(grids0: np.ndarray, rng, mask_id: int):
    xs, ms = [], []
    for row in grids0:
        c, m = training_mask(row, rng, mask_id)
        xs.append(c)
        ms.append(m)
    return np.stack(xs), np.stack(ms)


def gumbel_positions(models: ModelSet, logits: Tensor, grids: np.ndarray, mask: np.ndarray,
                     rng: np.random.Generator, temperature: float = 1.0) -> Tensor:
    """Differentiable joint positions from Gumbel-sampled base-layer tokens.

    Masked positions take the straight-through Gumbel sample, unmasked ones keep their
    ground-truth token; residual layers use the ground-truth codes. Decoder is frozen.
    """
    tok = models.tokenizer
    _, hard = ad.gumbel_softmax_st(logits, temperature, rng)
    K = logits.shape[-1]
    onehot = np.eye(K, dtype=np.float32)[grids[:, 0]]
    m = mask[..., None].astype(np.float32)
    mixed = hard * m + onehot * (1.0 - m)
    z = mixed @ tok.codebooks[0].entries.data
    for q in range(1, tok.n_layers):
        z = z + tok.codebooks[q].entries.data[grids[:, q]]
    feats = tok.denormalize(tok.decode_latent(z))
    return positions_from_features(feats, models.skeleton.joint_count, models.fps)


# ---------------------------------------------------------------- training state

@dataclass
class TrainState:
    stage: str
    step: int
    rng_state: dict
    opt: dict
    extra: dict = field(default_factory=dict)

    def save(self, path) -> None:
        header = json.dumps({"stage": self.stage, "step": self.step, "t": self.opt["t"],
                             "rng": self.rng_state}, sort_keys=True)
        sections = {
            "adam_m": {str(i): a for i, a in enumerate(self.opt["m"])},
            "adam_v": {str(i): a for i, a in enumerate(self.opt["v"])},
            "extra": dict(self.extra),
        }
        ckpt.save(path, header, sections)

    @classmethod
    def load(cls, path) -> "TrainState":
        header, sections = ckpt.load(path)
        try:
            meta = json.loads(header)
            n = len(sections["adam_m"])
            opt = {"t": meta["t"], "m": [sections["adam_m"][str(i)] for i in range(n)],
                   "v": [sections["adam_v"][str(i)] for i in range(n)]}
            return cls(meta["stage"], int(meta["step"]), meta["rng"], opt, sections.get("extra", {}))
        except (KeyError, ValueError) as e:
            raise ckpt.CheckpointError(f"bad training state: {e}") from None


# ---------------------------------------------------------------- stage runner

class StageRunner:
    """Runs one training stage step by step; resumable from a ``TrainState``."""

    def __init__(self, stage: str, models: ModelSet, corpus: Corpus, state: TrainState | None = None):
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
        missing = [s for s in PREREQUISITES[stage] if s not in models.stages]
        if missing:
            raise PrerequisiteError(f"stage {stage} needs trained {', '.join(missing)} first")
        self.stage, self.models, self.corpus = stage, models, corpus
        cfg = self.cfg = models.config
        if tuple(corpus.genre_names) != tuple(cfg.genres):
            raise DataError(f"corpus genres {corpus.genre_names} differ from config genres {cfg.genres}")
        self.train_idx, self.held_idx = corpus.split(cfg.holdout_every)
        self.weights = KinematicLossWeights(cfg.lambda_pos, cfg.lambda_vel, cfg.lambda_acc,
                                            cfg.lambda_foot, cfg.lambda_d)
        stage_no = STAGES.index(stage)
        self.rng = np.random.default_rng([cfg.seed, 101, stage_no])
        getattr(self, f"_setup_{stage}")(fresh=state is None)
        self.opt = ad.AdamW(self.params, lr=self.peak_lr, weight_decay=cfg.weight_decay)
        self.step_no = 0
        if state is not None:
            if state.stage != stage:
                raise ckpt.CheckpointError(f"training state is for stage {state.stage}, not {stage}")
            if len(state.opt["m"]) != len(self.params):
                raise ckpt.CheckpointError("training state does not match the model parameters")
            self.opt.load_state(state.opt)
            self.rng.bit_generator.state = state.rng_state
            self.step_no = state.step
            for k, v in state.extra.items():
                self._load_extra(k, v)

    # -- stage setup
    def _setup_tokenizer(self, fresh: bool):
        cfg, tok = self.cfg, self.models.tokenizer
        feats = np.stack([self.corpus.motions[i].features for i in self.train_idx])
        if fresh:
            flat = feats.reshape(-1, feats.shape[-1])
            tok.feat_mean.data = flat.mean(0).astype(np.float32)
            tok.feat_std.data = np.maximum(flat.std(0), 1e-2).astype(np.float32)
        self.X = np.stack([tok.normalize(f) for f in feats])
        if self.X.shape[1] < cfg.tok_window:
            raise DataError("clips shorter than the tokenizer training window")
        if fresh:
            tok.init_codebooks(self._tok_batch(64), self.rng)
        tok.unfreeze()
        self.params = tok.trainable_parameters()
        self.peak_lr, self.warmup = cfg.tok_lr, cfg.tok_warmup

    def _tok_batch(self, B):
        w = self.cfg.tok_window
        ci = self.rng.integers(0, len(self.X), B)
        st = self.rng.integers(0, self.X.shape[1] - w + 1, B)
        return np.stack([self.X[c, s:s + w] for c, s in zip(ci, st)])

    def _setup_t2m(self, fresh: bool):
        m = self.models
        m.tokenizer.freeze()
        self.data = build_token_dataset(m, self.corpus, self.train_idx)
        m.t2m.unfreeze()
        m.residual.unfreeze()
        self.params = m.t2m.trainable_parameters() + m.residual.trainable_parameters()
        self.peak_lr, self.warmup = self.cfg.lr, self.cfg.warmup

    def _setup_adapter(self, attr: str, fresh: bool):
        m = self.models
        for mod in (m.tokenizer, m.t2m, m.residual):
            mod.freeze()
        if getattr(m, attr) is None or fresh:
            setattr(m, attr, m.new_music_tower() if attr == "music" else m.new_pose_tower())
        tower = getattr(m, attr)
        tower.unfreeze()
        self.data = build_token_dataset(m, self.corpus, self.train_idx)
        self.params = tower.trainable_parameters()
        self.peak_lr, self.warmup = self.cfg.adapter_lr, self.cfg.warmup

    def _setup_music(self, fresh: bool):
        self._setup_adapter("music", fresh)

    def _setup_pose(self, fresh: bool):
        self._setup_adapter("pose", fresh)

    def _load_extra(self, key: str, value: np.ndarray):
        if key.startswith("usage_"):
            q = int(key.split("_")[1])
            self.models.tokenizer.codebooks[q].usage_count[:] = value.astype(np.int64)

    def _extra(self) -> dict:
        if self.stage != "tokenizer":
            return {}
        return {f"usage_{q}": cb.usage_count.astype(np.float32)
                for q, cb in enumerate(self.models.tokenizer.codebooks)}

    # -- per-stage losses
    def _loss_tokenizer(self):
        loss, info = self.models.tokenizer.forward_loss(self._tok_batch(self.cfg.tok_batch))
        self._tok_info = info
        return loss, {}

    def _genres(self, rows, drop):
        g = self.data.genre[rows].copy()
        g[self.rng.uniform(size=len(rows)) < drop] = -1
        return g

    def _loss_t2m(self):
        cfg, m, d = self.cfg, self.models, self.data
        rows = self.rng.integers(0, len(d.clip), cfg.batch)
        grids = d.grids[rows]
        corrupted, mask = _batch_masks(grids[:, 0], self.rng, m.t2m.mask_id)
        genre = self._genres(rows, cfg.cond_drop)
        main = t2m_loss(m.t2m.forward_logits(corrupted, genre), grids[:, 0], mask,
                        unmask_weight=cfg.unmask_weight)
        rgenre = self._genres(rows, cfg.cond_drop)
        music = None if self.rng.uniform() < cfg.res_music_drop else d.music[rows]
        res = None
        for q in range(1, m.tokenizer.n_layers):
            lg = m.residual.forward_logits(grids[:, :q], q, rgenre, music)
            term = ad.cross_entropy(lg, grids[:, q])
            res = term if res is None else res + term
        return main + res, {"ce": main.item(), "residual_ce": res.item()}

    def _loss_music(self):
        cfg, m, d = self.cfg, self.models, self.data
        rows = self.rng.integers(0, len(d.clip), cfg.adapter_batch)
        grids = d.grids[rows]
        corrupted, mask = _batch_masks(grids[:, 0], self.rng, m.t2m.mask_id)
        genre = self._genres(rows, cfg.adapter_genre_drop)
        logits = attach_forward(m.t2m, [(m.music, d.music[rows])], corrupted, genre)
        pos = gumbel_positions(m, logits, grids, mask, self.rng, cfg.gumbel_temperature)
        total, parts = music_adapter_loss(logits, grids[:, 0], mask, pos, d.positions[rows], self.weights,
                                          m.skeleton, m.fps, cfg.foot_static)
        return total, {k: v.item() for k, v in parts.items()}

    def _loss_pose(self):
        cfg, m, d = self.cfg, self.models, self.data
        rows = self.rng.integers(0, len(d.clip), cfg.adapter_batch)
        grids = d.grids[rows]
        corrupted, mask = _batch_masks(grids[:, 0], self.rng, m.t2m.mask_id)
        genre = self._genres(rows, cfg.adapter_genre_drop)
        Ps, Vs = zip(*(sample_training_constraint(d.positions[r], self.rng) for r in rows))
        P, V = np.stack(Ps), np.stack(Vs)
        cond = np.stack([pose_condition(p, v, m.tokenizer.downsample) for p, v in zip(P, V)])
        logits = attach_forward(m.t2m, [(m.pose, cond)], corrupted, genre)
        pos = gumbel_positions(m, logits, grids, mask, self.rng, cfg.gumbel_temperature)
        total, parts = pose_adapter_loss(logits, grids[:, 0], mask, P, pos, V, self.weights.d)
        return total, {k: v.item() for k, v in parts.items()}

    # -- loop
    def step(self) -> dict:
        with ad.Tape() as tape:
            loss, parts = getattr(self, f"_loss_{self.stage}")()
        self.opt.zero_grad()
        tape.backward(loss)
        ad.clip_grad_norm(self.params, self.cfg.grad_clip)
        self.opt.step(ad.warmup_lr(self.step_no, self.peak_lr, self.warmup))
        if self.stage == "tokenizer" and (self.step_no + 1) % self.cfg.tok_reset_every == 0:
            codebook_reset(self.models.tokenizer.codebooks, self._tok_info["residuals"], self.rng)
        row = {"step": self.step_no, "loss": float(loss.item())}
        row.update(parts)
        self.step_no += 1
        return row

    def run(self, total_steps: int, log=None) -> None:
        while self.step_no < total_steps:
            row = self.step()
            if log is not None:
                log(row)
        self.finish()

    def finish(self) -> None:
        m = self.models
        if self.stage == "tokenizer":
            m.tokenizer.trained_flag.data[:] = 1.0
        if self.stage not in m.stages:
            m.stages.append(self.stage)
            m.stages.sort(key=STAGES.index)

    def state(self) -> TrainState:
        return TrainState(self.stage, self.step_no, self.rng.bit_generator.state,
                          {"t": self.opt.t, "m": [a.copy() for a in self.opt.m],
                           "v": [a.copy() for a in self.opt.v]}, self._extra())


def stage_steps(cfg: Config, stage: str) -> int:
    return {"tokenizer": cfg.tok_steps, "t2m": cfg.t2m_steps, "music": cfg.adapter_steps,
            "pose": cfg.adapter_steps}[stage]


def progressive_train(stage: str, corpus: Corpus, config: Config | None = None,
                      models: ModelSet | None = None, steps: int | None = None, log=None) -> ModelSet:
    """Train one stage on top of ``models`` (a fresh set for the tokenizer stage)."""
    if models is None:
        if config is None:
            raise ValueError("need a config or an existing model set")
        models = ModelSet.build(config)
    runner = StageRunner(stage, models, corpus)
    runner.run(stage_steps(models.config, stage) if steps is None else steps, log)
    return models


# ---------------------------------------------------------------- held-out evaluation

def heldout_mpjpe(models: ModelSet, corpus: Corpus) -> float:
    _, held = corpus.split(models.config.holdout_every)
    tok = models.tokenizer
    errs = [mpjpe(corpus.motions[i], tok.decode(tok.encode(corpus.motions[i])), models.skeleton) for i in held]
    return float(np.mean(errs))


def heldout_masked_ce(models: ModelSet, corpus: Corpus, seed: int = 123, repeats: int = 8) -> float:
    """Genre-conditioned masked-token cross-entropy (nats) on held-out clips."""
    _, held = corpus.split(models.config.holdout_every)
    d = build_token_dataset(models, corpus, held, offsets=(0,))
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    for _ in range(repeats):
        x, mk = _batch_masks(d.grids[:, 0], rng, models.t2m.mask_id)
        lg = models.t2m.forward_logits(x, d.genre).data.astype(np.float64)
        ls = lg - lg.max(-1, keepdims=True)
        ls = ls - np.log(np.exp(ls).sum(-1, keepdims=True))
        nll = -np.take_along_axis(ls, d.grids[:, 0][..., None], -1)[..., 0]
        total += nll[mk].sum()
        count += mk.sum()
    return float(total / count)
