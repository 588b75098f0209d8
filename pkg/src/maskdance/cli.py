"""Command-line entry point: ``maskdance {gen-data,train,generate,edit,stitch,eval}``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 checkpoint error.
"""
from __future__ import annotations

import argparse
import csv
import glob
import os
import sys
import warnings

import numpy as np

from . import checkpoint as ckpt
from . import metrics as M
from .config import Config, ConfigError
from .models import STAGES, ModelSet, PrerequisiteError
from .motion import (GENRE_NAMES, MotionError, MotionSequence, PoseConstraint, read_beats, read_constraint,
                     read_motion, write_motion)
from .sampler import GuidanceBundle, SamplerError, edit_spatial, edit_temporal, generate, generate_long
from .training import Corpus, DataError, StageRunner, TrainState, stage_steps

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECKPOINT = 0, 2, 3, 4

ARCH_KEYS = ("genres", "tok_width", "tok_latent", "tok_codes", "tok_layers", "width", "heads", "depth",
             "max_tokens", "res_width", "res_depth", "fps")

REPORT_KEYS = ("fid_k", "fid_g", "div_k", "div_g", "bas", "pfc", "fsr")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _config(args) -> Config:
    cfg = Config.load(args.config) if getattr(args, "config", None) else Config()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v.strip())
    return cfg.validate()


def _load_models(path, args=None) -> ModelSet:
    models = ModelSet.load(path)
    if args is not None and (getattr(args, "config", None) or getattr(args, "set", None)):
        cfg = _config(args)
        for k in ARCH_KEYS:
            if getattr(cfg, k) != getattr(models.config, k):
                raise UsageError(f"config key {k} differs from the checkpoint's architecture")
        models.config = cfg
    models.freeze_all()
    return models


def _write_log(path, cfg: Config, lines: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in cfg.to_text().splitlines():
            fh.write(f"# {line}\n")
        for k, v in lines.items():
            fh.write(f"{k}={v}\n")


def _genre_id(models: ModelSet, name):
    if name is None:
        return None
    if name not in models.config.genres:
        raise UsageError(f"genre {name!r} not in {', '.join(models.config.genres)}")
    return models.config.genres.index(name)


def _bundle(models: ModelSet, args, **extra) -> GuidanceBundle:
    music = read_beats(args.beats) if getattr(args, "beats", None) else None
    genre = _genre_id(models, getattr(args, "genre", None))
    unconditional = getattr(args, "unconditional", False)
    if music is None and genre is None and not unconditional and not extra.get("pose"):
        raise UsageError("give --beats and/or --genre, or pass --unconditional")
    return GuidanceBundle.from_config(models.config, genre=genre, music=music, unconditional=unconditional,
                                      **extra)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    if args.clips < 1:
        raise UsageError("--clips must be at least 1")
    if args.seconds * 20 < 64:
        raise UsageError("--seconds too short (need at least 64 frames)")
    genres = [g.strip() for g in args.genres.split(",") if g.strip()]
    for g in genres:
        if g not in GENRE_NAMES:
            raise UsageError(f"unknown genre {g!r}; known: {', '.join(GENRE_NAMES)}")
    if os.path.isdir(args.out) and os.listdir(args.out) and not args.force:
        raise UsageError(f"{args.out} exists and is not empty (use --force)")
    corpus = Corpus.synthesize(args.seed, genres, args.clips, args.seconds)
    corpus.save(args.out)
    print(f"wrote {len(corpus)} clips to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    state = None
    if args.resume:
        models = _load_models(args.resume, args)
        state_path = args.resume + ".state"
        if not os.path.exists(state_path):
            raise ckpt.CheckpointError(f"no training state next to {args.resume}")
        state = TrainState.load(state_path)
        if state.stage != args.stage:
            raise ckpt.CheckpointError(f"resume state is for stage {state.stage}")
    elif args.init:
        models = _load_models(args.init, args)
    elif args.stage == "tokenizer":
        models = ModelSet.build(_config(args))
    else:
        raise PrerequisiteError(f"stage {args.stage} needs --init with a checkpoint holding earlier stages")
    cfg = models.config
    corpus = Corpus.load(args.data, cfg.genres)
    runner = StageRunner(args.stage, models, corpus, state)
    total = args.steps if args.steps is not None else stage_steps(cfg, args.stage)
    log_path = args.log or args.out + ".loss.csv"
    append = state is not None and os.path.exists(log_path) and log_path == (args.log or args.resume + ".loss.csv")
    fh = open(log_path, "a" if append else "w", newline="", encoding="utf-8")
    writer = None
    try:
        def log(row):
            nonlocal writer
            if writer is None:
                writer = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
                if not append:
                    writer.writeheader()
            writer.writerow({k: (v if k == "step" else f"{v:.8g}") for k, v in row.items()})
        runner.run(total, log)
    finally:
        fh.close()
    models.save(args.out)
    runner.state().save(args.out + ".state")
    print(f"stage {args.stage}: {runner.step_no} steps, checkpoint {args.out}")
    return EXIT_OK


def _frames_arg(frames: int, ds: int = 4) -> int:
    if frames < 1:
        raise UsageError("--frames must be positive")
    if frames % ds:
        rounded = frames + (-frames) % ds
        warnings.warn(f"--frames {frames} rounded up to {rounded} (multiple of {ds})", stacklevel=2)
        return rounded
    return frames


def cmd_generate(args) -> int:
    models = _load_models(args.checkpoint, args)
    models.require("tokenizer", "t2m")
    frames = _frames_arg(args.frames, models.tokenizer.downsample)
    bundle = _bundle(models, args)
    rng = np.random.default_rng(args.seed)
    motion, grid, trace = generate(models, bundle, frames, rng=rng)
    write_motion(args.out, motion)
    if args.trace:
        trace.write(args.trace)
    _write_log(args.out + ".log", models.config, {"seed": args.seed, "frames": frames,
                                                  "tokens": " ".join(map(str, grid.indices[0]))})
    print(f"wrote {frames} frames to {args.out}")
    return EXIT_OK


def _parse_ranges(text: str):
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            a, b = part.split(":")
            out.append((int(a), int(b)))
        except ValueError:
            raise UsageError(f"bad keep range {part!r}; expected start:stop") from None
    return out


def cmd_edit(args) -> int:
    if args.mode == "spatial" and not args.constraints:
        raise UsageError("spatial mode needs --constraints")
    if args.mode == "temporal" and args.keep_ranges is None:
        raise UsageError("temporal mode needs --keep-ranges")
    if args.mode == "spatial" and args.keep_ranges is not None:
        raise UsageError("--keep-ranges only applies to temporal mode")
    if args.mode == "temporal" and args.constraints:
        raise UsageError("--constraints only applies to spatial mode")
    models = _load_models(args.checkpoint, args)
    motion = read_motion(args.motion)
    rng = np.random.default_rng(args.seed)
    if args.mode == "spatial":
        models.require("tokenizer", "t2m", "pose")
        constraint = read_constraint(args.constraints)
        bundle = GuidanceBundle.from_config(models.config, genre=_genre_id(models, args.genre),
                                            music=read_beats(args.beats) if args.beats else None,
                                            pose=constraint)
        out, info = edit_spatial(models, motion, constraint, bundle, rng=rng)
    else:
        models.require("tokenizer", "t2m")
        bundle = _bundle(models, args)
        out, _, _ = edit_temporal(models, motion, _parse_ranges(args.keep_ranges), bundle, rng=rng)
        info = {}
        if args.constraints:
            c = read_constraint(args.constraints)
            info["joint_dist_post"] = M.joint_distance(c, out, models.skeleton)
    write_motion(args.out, out)
    lines = {"mode": args.mode, "seed": args.seed}
    lines.update({k: f"{v:.8f}" for k, v in info.items()})
    _write_log(args.out + ".log", models.config, lines)
    for k, v in info.items():
        print(f"{k}={v:.8f}")
    return EXIT_OK


def _read_segments(path, models: ModelSet):
    segs = []
    base = os.path.dirname(os.path.abspath(path))
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 3:
                raise DataError(f"segment file line {n}: expected genre,beats,frames")
            genre, beats, frames = parts
            try:
                frames = int(frames)
            except ValueError:
                raise DataError(f"segment file line {n}: frames must be an integer") from None
            if genre and genre not in models.config.genres:
                raise DataError(f"segment file line {n}: unknown genre {genre!r}")
            music = read_beats(beats if os.path.isabs(beats) else os.path.join(base, beats)) if beats else None
            g = models.config.genres.index(genre) if genre else None
            if g is None and music is None:
                raise DataError(f"segment file line {n}: needs a genre or a beats file")
            segs.append((GuidanceBundle.from_config(models.config, genre=g, music=music), frames))
    if not segs:
        raise DataError("segment file is empty")
    return segs


def cmd_stitch(args) -> int:
    models = _load_models(args.checkpoint, args)
    models.require("tokenizer", "t2m")
    segs = _read_segments(args.segments, models)
    if args.overlap < 1:
        raise UsageError("--overlap must be at least 1")
    rng = np.random.default_rng(args.seed)
    motion, grid = generate_long(models, [b for b, _ in segs], [f for _, f in segs], args.overlap, rng=rng)
    write_motion(args.out, motion)
    _write_log(args.out + ".log", models.config, {"seed": args.seed, "segments": len(segs),
                                                  "frames": motion.frames})
    print(f"wrote {motion.frames} frames to {args.out}")
    return EXIT_OK


def _read_dir(path):
    files = sorted(glob.glob(os.path.join(path, "*.motion")))
    if not files:
        raise DataError(f"no .motion files in {path}")
    return [os.path.splitext(os.path.basename(f))[0] for f in files], [read_motion(f) for f in files]


def evaluate(gen: list, ref: list, beats: list | None, cfg: Config, names=None):
    """Metric report (dict) and per-clip rows for generated vs reference motions."""
    kin_g = np.stack([M.kinematic_features(m) for m in gen])
    kin_r = np.stack([M.kinematic_features(m) for m in ref])
    geo_g = np.stack([M.geometric_features(m) for m in gen])
    geo_r = np.stack([M.geometric_features(m) for m in ref])
    rows = []
    for i, m in enumerate(gen):
        row = {"clip": names[i] if names else str(i),
               "pfc": M.pfc(m), "fsr": M.foot_skating_ratio(m, h_contact=cfg.fsr_height, v_slide=cfg.fsr_speed)}
        if beats is not None and beats[i] is not None:
            dance = M.extract_dance_beats(m) * m.fps
            music = beats[i].beat_times * m.fps
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                row["bas"] = M.beat_align_score(music, dance, cfg.bas_sigma)
        else:
            row["bas"] = float("nan")
        rows.append(row)
    report = {
        "fid_k": M.fid(kin_g, kin_r),
        "fid_g": M.fid(geo_g, geo_r),
        "div_k": M.diversity(kin_g) if len(gen) > 1 else float("nan"),
        "div_g": M.diversity(geo_g) if len(gen) > 1 else float("nan"),
        "bas": float(np.mean([r["bas"] for r in rows])),
        "pfc": float(np.mean([r["pfc"] for r in rows])),
        "fsr": float(np.mean([r["fsr"] for r in rows])),
    }
    return report, rows


def cmd_eval(args) -> int:
    cfg = _config(args)
    names, gen = _read_dir(args.gen)
    _, ref = _read_dir(args.ref)
    beats = None
    if args.beats:
        beats = []
        for n in names:
            p = os.path.join(args.beats, n + ".beats")
            if not os.path.exists(p):
                raise DataError(f"no beat track {p} for generated clip {n}")
            beats.append(read_beats(p))
    report, rows = evaluate(gen, ref, beats, cfg, names)
    with open(args.report, "w", encoding="utf-8") as fh:
        for line in cfg.to_text().splitlines():
            fh.write(f"# {line}\n")
        for k in REPORT_KEYS:
            fh.write(f"{k}={report[k]:.8f}\n")
    with open(args.report + ".csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["clip", "bas", "pfc", "fsr"])
        for r in rows:
            w.writerow([r["clip"], f"{r['bas']:.8f}", f"{r['pfc']:.8f}", f"{r['fsr']:.8f}"])
    for k in REPORT_KEYS:
        print(f"{k}={report[k]:.8f}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maskdance", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="key = value config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    g = sub.add_parser("gen-data", help="write the procedural corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--genres", default="ballet,hiphop,popping,jazz")
    g.add_argument("--clips", type=int, default=32, help="clips per genre")
    g.add_argument("--seconds", type=float, default=8.0)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one stage")
    t.add_argument("stage", choices=STAGES)
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--init", help="checkpoint holding the earlier stages")
    t.add_argument("--resume", help="checkpoint (with .state file) to continue")
    t.add_argument("--steps", type=int, help="total steps for the stage (default from config)")
    t.add_argument("--log", help="loss CSV (default OUT.loss.csv)")
    t.set_defaults(func=cmd_train)

    gen = sub.add_parser("generate", help="sample a new motion")
    common(gen)
    gen.add_argument("--checkpoint", required=True)
    gen.add_argument("--beats")
    gen.add_argument("--genre")
    gen.add_argument("--unconditional", action="store_true")
    gen.add_argument("--frames", type=int, default=160)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--trace", help="write the decoding trace CSV here")
    gen.set_defaults(func=cmd_generate)

    e = sub.add_parser("edit", help="spatial or temporal editing")
    common(e)
    e.add_argument("--mode", choices=("spatial", "temporal"), required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--motion", required=True)
    e.add_argument("--constraints")
    e.add_argument("--keep-ranges", dest="keep_ranges", help="frame ranges start:stop[,start:stop...]")
    e.add_argument("--beats")
    e.add_argument("--genre")
    e.add_argument("--unconditional", action="store_true")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_edit)

    s = sub.add_parser("stitch", help="long-form generation from a segment file")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--segments", required=True, help="lines of genre,beats_file,frames")
    s.add_argument("--overlap", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_stitch)

    v = sub.add_parser("eval", help="metric report for a directory of motions")
    common(v)
    v.add_argument("--gen", required=True)
    v.add_argument("--ref", required=True)
    v.add_argument("--beats")
    v.add_argument("--report", required=True)
    v.set_defaults(func=cmd_eval)
    return p


def _thread_limit():
    value = os.environ.get("DMSK_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise UsageError("DMSK_THREADS must be an integer") from None
    if n < 1:
        raise UsageError("DMSK_THREADS must be at least 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    try:
        limiter = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except (UsageError, ConfigError, SamplerError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ckpt.CheckpointError, PrerequisiteError) as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (DataError, MotionError, M.MetricError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
