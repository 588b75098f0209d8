"""Skeleton, pose-feature layout, forward kinematics, procedural dance corpus and file I/O.

Feature layout of one frame (``D = 3 + 3 * (J - 1) + 2``):

* ``[0:2]``   horizontal root velocity (x, y) in m/s; frame 0 carries the
  displacement from the caller-supplied origin
* ``[2]``     absolute root height (z-up, meters)
* ``[3:3+3(J-1)]`` root-relative positions of joints 1..J-1
* ``[-2:]``   left/right foot contact in [0, 1]

The root slot mixes velocity and height the same way the usual redundant
motion representation does, so vertical drift cannot accumulate under
integration.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

FPS = 20
MUSIC_DIM = 8
MOTION_MAGIC = b"DMOT"
BEAT_MAGIC = b"DBEA"
POSE_MAGIC = b"DPOS"
FORMAT_VERSION = 1


class MotionError(ValueError):
    pass


class SequenceTooShortError(MotionError):
    pass


class UnknownGenreError(MotionError, KeyError):
    pass


class FileFormatError(MotionError):
    pass


class VersionError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    pass


# ---------------------------------------------------------------- skeleton

@dataclass(frozen=True)
class Skeleton:
    names: tuple
    parents: tuple
    rest_offsets: np.ndarray
    foot_joints: tuple
    rest_root_height: float = 0.92

    def __post_init__(self):
        J = len(self.parents)
        if self.parents[0] != -1 or any(not 0 <= p < j for j, p in enumerate(self.parents) if j):
            raise MotionError("parents must form a tree rooted at joint 0 (parent index < child)")
        if self.rest_offsets.shape != (J, 3) or not np.isfinite(self.rest_offsets).all():
            raise MotionError("rest offsets must be a finite J x 3 array")
        for f in self.foot_joints:
            if f in self.parents:
                raise MotionError("foot joints must be leaves")

    @property
    def joint_count(self) -> int:
        return len(self.parents)

    @property
    def feature_dim(self) -> int:
        return 3 + 3 * (self.joint_count - 1) + 2

    def children(self, j: int) -> list[int]:
        return [c for c, p in enumerate(self.parents) if p == j]

    def rest_local_positions(self) -> np.ndarray:
        """Root-relative rest positions, offsets composed down the tree."""
        pos = np.zeros((self.joint_count, 3))
        for j in range(1, self.joint_count):
            pos[j] = pos[self.parents[j]] + self.rest_offsets[j]
        return pos

    def index(self, name: str) -> int:
        return self.names.index(name)


def default_skeleton() -> Skeleton:
    names = ("pelvis", "chest", "head",
             "l_shoulder", "l_elbow", "l_hand",
             "r_shoulder", "r_elbow", "r_hand",
             "l_knee", "l_foot", "r_knee", "r_foot")
    parents = (-1, 0, 1, 1, 3, 4, 1, 6, 7, 0, 9, 0, 11)
    offsets = np.array([
        [0.0, 0.0, 0.0],
        [0.0, 0.0, 0.30],
        [0.0, 0.0, 0.25],
        [0.17, 0.0, 0.15], [0.0, 0.0, -0.28], [0.0, 0.0, -0.26],
        [-0.17, 0.0, 0.15], [0.0, 0.0, -0.28], [0.0, 0.0, -0.26],
        [0.10, 0.0, -0.45], [0.0, 0.0, -0.45],
        [-0.10, 0.0, -0.45], [0.0, 0.0, -0.45],
    ])
    return Skeleton(names, parents, offsets, foot_joints=(10, 12))


SKELETON = default_skeleton()


# ---------------------------------------------------------------- data types

def feature_slices(joint_count: int) -> dict[str, slice]:
    n_local = 3 * (joint_count - 1)
    return {
        "root_velocity": slice(0, 3),
        "local_joint_positions": slice(3, 3 + n_local),
        "foot_contact": slice(3 + n_local, 5 + n_local),
    }


@dataclass(frozen=True)
class MotionSequence:
    features: np.ndarray
    fps: int = FPS

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float32)
        if f.ndim != 2 or f.shape[1] < 8 or (f.shape[1] - 5) % 3:
            raise MotionError(f"feature matrix has invalid shape {f.shape}")
        object.__setattr__(self, "features", f)
        contact = f[:, -2:]
        if f.shape[0] and ((contact < -1e-6) | (contact > 1 + 1e-6)).any():
            raise MotionError("foot contact entries must lie in [0, 1]")

    @property
    def frames(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def joint_count(self) -> int:
        return (self.dim - 5) // 3 + 1

    def slice(self, name: str) -> np.ndarray:
        return self.features[:, feature_slices(self.joint_count)[name]]


@dataclass(frozen=True)
class BeatTrack:
    beat_times: np.ndarray
    features: np.ndarray
    fps: int = FPS

    def __post_init__(self):
        bt = np.asarray(self.beat_times, dtype=np.float64)
        if bt.ndim != 1 or len(bt) < 2 or not (np.diff(bt) > 0).all():
            raise MotionError("beat times must hold at least two strictly ascending values")
        object.__setattr__(self, "beat_times", bt)
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float32))

    @property
    def tempo(self) -> float:
        """Beats per minute from the mean inter-beat interval."""
        return 60.0 * (len(self.beat_times) - 1) / (self.beat_times[-1] - self.beat_times[0])

    @property
    def frames(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class PoseConstraint:
    positions: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.validity).astype(bool)
        p = np.asarray(self.positions, dtype=np.float32)
        if p.shape != v.shape + (3,):
            raise MotionError("positions must be N x J x 3 matching validity N x J")
        p = np.where(v[..., None], p, 0.0).astype(np.float32)
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "validity", v)

    @property
    def frames(self) -> int:
        return self.validity.shape[0]

    @property
    def count(self) -> int:
        return int(self.validity.sum())

    def features(self) -> np.ndarray:
        """Per-frame positions (J*3) concatenated with validity (J)."""
        n = self.frames
        return np.concatenate([self.positions.reshape(n, -1),
                               self.validity.astype(np.float32)], axis=1)


# ---------------------------------------------------------------- kinematics

def forward_kinematics(pose_features: np.ndarray, skeleton: Skeleton = SKELETON,
                       root_xy: np.ndarray | tuple = (0.0, 0.0)) -> np.ndarray:
    """Global J x 3 joint positions of one feature row.

    ``root_xy`` is the caller's accumulated horizontal root position; height comes
    from the row itself.
    """
    row = np.asarray(pose_features, dtype=np.float64)
    if row.shape != (skeleton.feature_dim,):
        raise MotionError(f"feature row has {row.shape}, skeleton needs ({skeleton.feature_dim},)")
    J = skeleton.joint_count
    root = np.array([root_xy[0], root_xy[1], row[2]])
    out = np.empty((J, 3))
    out[0] = root
    out[1:] = root + row[3:3 + 3 * (J - 1)].reshape(J - 1, 3)
    return out


def root_trajectory(features: np.ndarray, fps: int, origin=(0.0, 0.0)) -> np.ndarray:
    """N x 3 root positions: integrated horizontal velocity plus stored height."""
    f = np.asarray(features, dtype=np.float64)
    xy = np.asarray(origin, dtype=np.float64) + np.cumsum(f[:, 0:2], axis=0) / fps
    return np.concatenate([xy, f[:, 2:3]], axis=1)


def joint_positions(seq: MotionSequence, skeleton: Skeleton = SKELETON, origin=(0.0, 0.0)) -> np.ndarray:
    """N x J x 3 global joint positions of a whole sequence."""
    if seq.dim != skeleton.feature_dim:
        raise MotionError(f"sequence width {seq.dim} does not match skeleton ({skeleton.feature_dim})")
    f = seq.features.astype(np.float64)
    J = skeleton.joint_count
    root = root_trajectory(f, seq.fps, origin)
    local = f[:, 3:3 + 3 * (J - 1)].reshape(-1, J - 1, 3)
    return np.concatenate([root[:, None, :], root[:, None, :] + local], axis=1)


def derive_kinematics(seq: MotionSequence, skeleton: Skeleton = SKELETON):
    """Joint velocity ((N-1) x J x 3) and acceleration ((N-2) x J x 3), per second."""
    if seq.frames < 3:
        raise SequenceTooShortError(f"need at least 3 frames, got {seq.frames}")
    pos = joint_positions(seq, skeleton)
    vel = np.diff(pos, axis=0) * seq.fps
    acc = np.diff(vel, axis=0) * seq.fps
    return vel, acc


def mpjpe(a: MotionSequence, b: MotionSequence, skeleton: Skeleton = SKELETON) -> float:
    """Mean per-joint position error between two equally long sequences (meters)."""
    pa, pb = joint_positions(a, skeleton), joint_positions(b, skeleton)
    if pa.shape != pb.shape:
        raise MotionError("sequences differ in length")
    return float(np.linalg.norm(pa - pb, axis=-1).mean())


# ---------------------------------------------------------------- procedural corpus

@dataclass(frozen=True)
class GenreTemplate:
    tempo_range: tuple
    arm_raise: float        # lateral abduction base (rad)
    arm_amp: float          # abduction swing amplitude
    arm_swing: float        # forward swing amplitude
    arms_mirrored: bool     # anti-phase arms
    elbow_base: float
    elbow_amp: float
    lean_amp: float
    twist_amp: float
    head_amp: float
    bob: float
    step_height: float
    stance: float
    phase: float


GENRES: dict[str, GenreTemplate] = {
    "ballet": GenreTemplate((80, 100), 1.3, 0.45, 0.10, False, 0.2, 0.15, 0.05, 0.05, 0.05, 0.015, 0.05, 0.08, 0.0),
    "hiphop": GenreTemplate((90, 110), 0.3, 0.20, 0.80, True, 1.0, 0.60, 0.15, 0.10, 0.20, 0.050, 0.10, 0.16, 0.6),
    "popping": GenreTemplate((100, 120), 0.9, 0.60, 0.20, True, 1.3, 0.40, 0.08, 0.25, 0.10, 0.030, 0.06, 0.14, 1.2),
    "jazz": GenreTemplate((110, 130), 2.0, 0.40, 0.40, False, 0.5, 0.50, 0.20, 0.05, 0.15, 0.035, 0.14, 0.12, 1.8),
    "locking": GenreTemplate((95, 115), 0.6, 0.50, 0.50, False, 1.4, 0.30, 0.10, 0.15, 0.25, 0.040, 0.08, 0.18, 2.4),
    "house": GenreTemplate((115, 130), 0.5, 0.30, 0.30, True, 0.8, 0.20, 0.12, 0.20, 0.10, 0.045, 0.12, 0.10, 3.0),
    "breaking": GenreTemplate((100, 120), 1.0, 0.70, 0.60, True, 0.6, 0.70, 0.25, 0.30, 0.20, 0.060, 0.15, 0.20, 3.6),
    "waacking": GenreTemplate((110, 125), 2.3, 0.60, 0.20, True, 0.9, 0.80, 0.05, 0.10, 0.10, 0.020, 0.05, 0.10, 4.2),
}
GENRE_NAMES = tuple(GENRES)
BEAT_ACCENT = 0.75


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.stack([np.stack([np.ones_like(a), 0 * a, 0 * a], -1),
                     np.stack([0 * a, c, -s], -1),
                     np.stack([0 * a, s, c], -1)], -2)


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.stack([np.stack([c, 0 * a, s], -1),
                     np.stack([0 * a, np.ones_like(a), 0 * a], -1),
                     np.stack([-s, 0 * a, c], -1)], -2)


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.stack([np.stack([c, -s, 0 * a], -1),
                     np.stack([s, c, 0 * a], -1),
                     np.stack([0 * a, 0 * a, np.ones_like(a)], -1)], -2)


def _apply(R, v):
    return np.einsum("nij,nj->ni", R, v)


def _two_bone_ik(hip, foot, forward, a, b):
    """Knee positions for a hip-knee-foot chain bending towards ``forward``."""
    d_vec = foot - hip
    d = np.linalg.norm(d_vec, axis=-1, keepdims=True)
    d = np.clip(d, 1e-6, a + b - 1e-4)
    u = d_vec / np.linalg.norm(d_vec, axis=-1, keepdims=True)
    w = forward - (forward * u).sum(-1, keepdims=True) * u
    w /= np.linalg.norm(w, axis=-1, keepdims=True)
    cos_a = np.clip((a * a + d * d - b * b) / (2 * a * d), -1.0, 1.0)
    sin_a = np.sqrt(1 - cos_a ** 2)
    return hip + a * (cos_a * u + sin_a * w)


def _beat_features(beat_times: np.ndarray, tempo: float, frames: int, fps: int,
                   loudness: float, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(frames) / fps
    period = 60.0 / tempo
    t0 = beat_times[0]
    phase = np.mod((t - t0) / period, 1.0)
    beat_frames = np.round(beat_times * fps).astype(int)
    last = np.full(frames, -10**6)
    for bf in beat_frames:
        if 0 <= bf < frames:
            last[bf:] = bf
    since = np.where(last >= 0, np.arange(frames) - last, np.round(phase * period * fps))
    impulse = np.exp(-since / 2.0)
    energy = loudness * (0.6 + 0.4 * np.exp(-((phase - np.round(phase)) ** 2) / 0.02))
    noise = rng.normal(0.0, 0.1, size=(frames, 2))
    return np.column_stack([impulse, phase, np.sin(2 * np.pi * phase), np.cos(2 * np.pi * phase),
                            np.full(frames, tempo / 200.0), energy, noise]).astype(np.float32)


def synth_clip(seed: int, genre: str, index: int, clip_seconds: float = 8.0, fps: int = FPS,
               skeleton: Skeleton = SKELETON):
    """One deterministic (motion, beats) pair; a pure function of (seed, genre, index)."""
    if genre not in GENRES:
        raise UnknownGenreError(f"unknown genre {genre!r}; known: {', '.join(GENRE_NAMES)}")
    frames = int(round(clip_seconds * fps))
    if frames < 64:
        raise SequenceTooShortError("clips need at least 64 frames")
    g = GENRES[genre]
    rng = np.random.default_rng([seed, GENRE_NAMES.index(genre), index])
    tempo = rng.uniform(*g.tempo_range)
    period = 60.0 / tempo
    t0 = rng.uniform(0.0, period)
    jitter = rng.uniform(0.85, 1.15, size=6)
    loudness = rng.uniform(0.7, 1.0)

    t = np.arange(frames) / fps
    # warped beat phase: movement slows into every beat and speeds through the off-beat
    lin = 2 * np.pi * (t - t0) / period
    phi = lin - BEAT_ACCENT * np.sin(lin)
    J = skeleton.joint_count
    off = skeleton.rest_offsets
    N = frames

    # root: vertical bounce on every half beat, yaw twist once per beat
    bob = g.bob * jitter[0] * (1 - np.cos(2 * phi)) / 2
    root = np.column_stack([np.zeros(N), np.zeros(N), skeleton.rest_root_height - 0.02 - bob])
    yaw = g.twist_amp * jitter[1] * np.cos(phi + g.phase)
    R_root = _rot_z(yaw)
    lean = g.lean_amp * jitter[2] * np.cos(phi + g.phase)
    R_chest = R_root @ _rot_y(lean * 0.5) @ _rot_x(lean)

    pos = np.zeros((N, J, 3))
    pos[:, 0] = root
    pos[:, 1] = root + _apply(R_root, np.broadcast_to(off[1], (N, 3)))
    R_head = R_chest @ _rot_x(g.head_amp * jitter[3] * np.cos(phi + g.phase + 0.5))
    pos[:, 2] = pos[:, 1] + _apply(R_head, np.broadcast_to(off[2], (N, 3)))

    for side, (sh, el, ha) in ((1.0, (3, 4, 5)), (-1.0, (6, 7, 8))):
        arm_phase = phi + g.phase + (np.pi if (g.arms_mirrored and side < 0) else 0.0)
        abduct = g.arm_raise + g.arm_amp * jitter[4] * np.cos(arm_phase)
        swing = g.arm_swing * jitter[5] * np.sin(arm_phase)
        R_sh = R_chest @ _rot_y(-side * abduct) @ _rot_x(swing)
        elbow_flex = g.elbow_base + g.elbow_amp * (1 + np.cos(arm_phase)) / 2
        R_el = R_sh @ _rot_x(elbow_flex)
        pos[:, sh] = pos[:, 1] + _apply(R_chest, np.broadcast_to(off[sh], (N, 3)))
        pos[:, el] = pos[:, sh] + _apply(R_sh, np.broadcast_to(off[el], (N, 3)))
        pos[:, ha] = pos[:, el] + _apply(R_el, np.broadcast_to(off[ha], (N, 3)))

    # legs: alternate half-beat swings with planted feet otherwise
    cycle = np.mod(phi, 2 * np.pi)
    forward = _apply(R_root, np.broadcast_to([0.0, 1.0, 0.0], (N, 3)))
    contacts = np.zeros((N, 2))
    for k, (side, (kn, ft)) in enumerate(((1.0, (9, 10)), (-1.0, (11, 12)))):
        in_swing = (cycle < np.pi) if side > 0 else (cycle >= np.pi)
        lift = np.where(in_swing, g.step_height * np.sin(cycle) ** 2, 0.0)
        foot = np.column_stack([np.full(N, side * g.stance), np.zeros(N), 0.02 + lift])
        hip = root + _apply(R_root, np.broadcast_to([off[kn, 0], 0.0, 0.0], (N, 3)))
        pos[:, kn] = _two_bone_ik(hip, foot, forward, 0.45, 0.45)
        pos[:, ft] = foot
        contacts[:, k] = (~in_swing).astype(float)

    feats = np.zeros((N, skeleton.feature_dim))
    feats[:, 0:2] = 0.0
    feats[:, 2] = root[:, 2]
    feats[:, 3:3 + 3 * (J - 1)] = (pos[:, 1:] - root[:, None, :]).reshape(N, -1)
    feats[:, -2:] = contacts

    n_beats = int(np.floor((clip_seconds - t0) / period)) + 1
    beat_times = t0 + period * np.arange(n_beats)
    music = _beat_features(beat_times, tempo, frames, fps, loudness, rng)
    return MotionSequence(feats.astype(np.float32), fps), BeatTrack(beat_times, music, fps)


def synth_corpus(seed: int, genres, clips_per_genre: int, clip_seconds: float = 8.0, fps: int = FPS):
    """Procedural corpus: lists of motions, beat tracks and genre ids (index into ``genres``)."""
    genres = list(genres)
    for g in genres:
        if g not in GENRES:
            raise UnknownGenreError(f"unknown genre {g!r}")
    if clip_seconds * fps < 64:
        raise SequenceTooShortError("clip_seconds * fps must be at least 64 frames")
    motions, beats, ids = [], [], []
    for gi, g in enumerate(genres):
        for i in range(clips_per_genre):
            m, b = synth_clip(seed, g, i, clip_seconds, fps)
            motions.append(m)
            beats.append(b)
            ids.append(gi)
    return motions, beats, ids


# ---------------------------------------------------------------- file I/O

def _check_header(buf: bytes, magic: bytes, size: int) -> None:
    if len(buf) < size:
        raise TruncatedFileError("file shorter than its header")
    if buf[:4] != magic:
        raise VersionError(f"bad magic {buf[:4]!r}, expected {magic!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported version {version}")


def motion_to_bytes(seq: MotionSequence) -> bytes:
    if seq.frames == 0:
        raise MotionError("refusing to write an empty sequence")
    head = MOTION_MAGIC + struct.pack("<IIII", FORMAT_VERSION, seq.fps, seq.frames, seq.dim)
    return head + seq.features.astype("<f4").tobytes()


def motion_from_bytes(buf: bytes) -> MotionSequence:
    _check_header(buf, MOTION_MAGIC, 20)
    _, fps, n, d = struct.unpack_from("<IIII", buf, 4)
    need = 20 + 4 * n * d
    if len(buf) < need:
        raise TruncatedFileError(f"motion payload truncated: {len(buf)} < {need} bytes")
    data = np.frombuffer(buf, dtype="<f4", count=n * d, offset=20).reshape(n, d)
    return MotionSequence(data.astype(np.float32), int(fps))


def write_motion(path, seq: MotionSequence) -> None:
    payload = motion_to_bytes(seq)
    with open(path, "wb") as fh:
        fh.write(payload)


def read_motion(path) -> MotionSequence:
    with open(path, "rb") as fh:
        return motion_from_bytes(fh.read())


def beats_to_bytes(track: BeatTrack) -> bytes:
    n, fm = track.features.shape
    if n == 0:
        raise MotionError("refusing to write an empty beat track")
    head = BEAT_MAGIC + struct.pack("<IIIII", FORMAT_VERSION, track.fps, n, fm, len(track.beat_times))
    return head + track.beat_times.astype("<f8").tobytes() + track.features.astype("<f4").tobytes()


def beats_from_bytes(buf: bytes) -> BeatTrack:
    _check_header(buf, BEAT_MAGIC, 24)
    _, fps, n, fm, count = struct.unpack_from("<IIIII", buf, 4)
    need = 24 + 8 * count + 4 * n * fm
    if len(buf) < need:
        raise TruncatedFileError(f"beat payload truncated: {len(buf)} < {need} bytes")
    times = np.frombuffer(buf, dtype="<f8", count=count, offset=24).astype(np.float64)
    feats = np.frombuffer(buf, dtype="<f4", count=n * fm, offset=24 + 8 * count).reshape(n, fm)
    return BeatTrack(times, feats.astype(np.float32), int(fps))


def write_beats(path, track: BeatTrack) -> None:
    payload = beats_to_bytes(track)
    with open(path, "wb") as fh:
        fh.write(payload)


def read_beats(path) -> BeatTrack:
    with open(path, "rb") as fh:
        return beats_from_bytes(fh.read())


def constraint_to_bytes(c: PoseConstraint) -> bytes:
    n, j = c.validity.shape
    if n == 0:
        raise MotionError("refusing to write an empty constraint")
    head = POSE_MAGIC + struct.pack("<III", FORMAT_VERSION, n, j)
    return head + c.positions.astype("<f4").tobytes() + c.validity.astype(np.uint8).tobytes()


def constraint_from_bytes(buf: bytes) -> PoseConstraint:
    _check_header(buf, POSE_MAGIC, 16)
    _, n, j = struct.unpack_from("<III", buf, 4)
    need = 16 + 12 * n * j + n * j
    if len(buf) < need:
        raise TruncatedFileError("constraint payload truncated")
    pos = np.frombuffer(buf, dtype="<f4", count=n * j * 3, offset=16).reshape(n, j, 3)
    val = np.frombuffer(buf, dtype=np.uint8, count=n * j, offset=16 + 12 * n * j).reshape(n, j)
    return PoseConstraint(pos.astype(np.float32), val.astype(bool))


def write_constraint(path, c: PoseConstraint) -> None:
    payload = constraint_to_bytes(c)
    with open(path, "wb") as fh:
        fh.write(payload)


def read_constraint(path) -> PoseConstraint:
    with open(path, "rb") as fh:
        return constraint_from_bytes(fh.read())


def constraint_from_motion(seq: MotionSequence, joints, frames, skeleton: Skeleton = SKELETON) -> PoseConstraint:
    """Constraint that pins ``joints`` of ``seq`` on ``frames`` (global positions)."""
    pos = joint_positions(seq, skeleton).astype(np.float32)
    valid = np.zeros(pos.shape[:2], dtype=bool)
    valid[np.ix_(np.asarray(frames, dtype=int), np.asarray(joints, dtype=int))] = True
    return PoseConstraint(pos, valid)
