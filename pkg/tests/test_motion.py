import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maskdance import motion as mo
from maskdance.motion import SKELETON, MotionSequence


def _rest_row(root_height=0.9):
    row = np.zeros(SKELETON.feature_dim)
    row[2] = root_height
    row[3:39] = SKELETON.rest_local_positions()[1:].reshape(-1)
    return row


def test_feature_layout():
    assert SKELETON.joint_count == 13
    assert SKELETON.feature_dim == 41 == 3 + 3 * 12 + 2
    sl = mo.feature_slices(13)
    assert sl["root_velocity"] == slice(0, 3)
    assert sl["local_joint_positions"] == slice(3, 39)
    assert sl["foot_contact"] == slice(39, 41)


def test_skeleton_invariants():
    assert SKELETON.parents[0] == -1
    for f in SKELETON.foot_joints:
        assert SKELETON.children(f) == []
    with pytest.raises(mo.MotionError):
        mo.Skeleton(("a", "b"), (-1, 5), np.zeros((2, 3)), foot_joints=(1,))
    with pytest.raises(mo.MotionError):
        mo.Skeleton(("a", "b", "c"), (-1, 0, 1), np.zeros((3, 3)), foot_joints=(1,))


def test_fk_zero_local_positions():
    row = np.zeros(41)
    row[2] = 0.8
    out = mo.forward_kinematics(row, root_xy=(0.5, -1.0))
    assert np.allclose(out, [0.5, -1.0, 0.8])


def test_fk_rest_pose_hand_composed():
    out = mo.forward_kinematics(_rest_row(0.9))
    # manual composition of the left arm chain: chest, shoulder, elbow, hand
    chest = np.array([0.0, 0.0, 0.9 + 0.30])
    shoulder = chest + [0.17, 0.0, 0.15]
    elbow = shoulder + [0.0, 0.0, -0.28]
    hand = elbow + [0.0, 0.0, -0.26]
    head = chest + [0.0, 0.0, 0.25]
    foot = np.array([-0.10, 0.0, 0.9 - 0.90])
    assert np.allclose(out[3], shoulder)
    assert np.allclose(out[4], elbow)
    assert np.allclose(out[5], hand)
    assert np.allclose(out[2], head)
    assert np.allclose(out[12], foot)


def test_fk_dimension_error():
    with pytest.raises(mo.MotionError):
        mo.forward_kinematics(np.zeros(40))


def test_root_velocity_translates_rigidly():
    base = np.tile(_rest_row(), (10, 1))
    moved = base.copy()
    moved[:, 0] = 2.0
    moved[:, 1] = -1.0
    p0 = mo.joint_positions(MotionSequence(base))
    p1 = mo.joint_positions(MotionSequence(moved))
    shift = p1 - p0
    expected_x = 2.0 * np.arange(1, 11) / 20
    assert np.allclose(shift[..., 0], expected_x[:, None], atol=1e-6)
    assert np.allclose(shift[..., 1], -expected_x[:, None] / 2, atol=1e-6)
    assert np.allclose(shift[..., 2], 0.0)


def test_derive_kinematics_constant_is_exactly_zero():
    seq = MotionSequence(np.tile(_rest_row(), (8, 1)))
    vel, acc = mo.derive_kinematics(seq)
    assert vel.shape == (7, 13, 3) and acc.shape == (6, 13, 3)
    assert not vel.any() and not acc.any()


def test_derive_kinematics_linear_and_quadratic():
    fps = 20
    t = np.arange(30) / fps
    lin = np.tile(_rest_row(), (30, 1))
    lin[:, 3] += t                      # chest joint x moves 1 m/s
    vel, acc = mo.derive_kinematics(MotionSequence(lin, fps))
    assert np.allclose(vel[:, 1, 0], 1.0, atol=1e-4)
    assert np.allclose(acc[:, 1, 0], 0.0, atol=1e-2)
    quad = np.tile(_rest_row(), (30, 1))
    quad[:, 3] += t ** 2
    _, acc = mo.derive_kinematics(MotionSequence(quad, fps))
    assert np.allclose(acc[:, 1, 0], 2.0, atol=1e-2)


def test_derive_kinematics_too_short():
    with pytest.raises(mo.SequenceTooShortError):
        mo.derive_kinematics(MotionSequence(np.zeros((2, 41))))


def test_synth_clip_deterministic():
    a_m, a_b = mo.synth_clip(5, "jazz", 3)
    b_m, b_b = mo.synth_clip(5, "jazz", 3)
    assert a_m.features.tobytes() == b_m.features.tobytes()
    assert a_b.features.tobytes() == b_b.features.tobytes()
    assert np.array_equal(a_b.beat_times, b_b.beat_times)


def test_synth_corpus_pure_and_order_independent():
    m1, _, _ = mo.synth_corpus(3, ["ballet", "hiphop"], 2)
    m2, _, _ = mo.synth_corpus(3, ["hiphop", "ballet"], 2)
    assert m1[0].features.tobytes() == m2[2].features.tobytes()
    assert m1[3].features.tobytes() == m2[1].features.tobytes()


@pytest.mark.parametrize("genre", ["ballet", "hiphop", "popping", "jazz"])
def test_dominant_frequency_matches_tempo(genre):
    seq, beats = mo.synth_clip(7, genre, 0, clip_seconds=12.8)
    pos = mo.joint_positions(seq)
    hand = pos[:, 5] - pos[:, 5].mean(axis=0)
    spec = (np.abs(np.fft.rfft(hand, axis=0)) ** 2).sum(axis=1)
    freqs = np.fft.rfftfreq(len(hand), 1 / seq.fps)
    peak = freqs[1 + np.argmax(spec[1:])]
    bin_width = freqs[1]
    assert abs(peak - beats.tempo / 60.0) <= bin_width


def test_genres_distinct():
    a, _ = mo.synth_clip(1, "ballet", 0)
    b, _ = mo.synth_clip(1, "hiphop", 0)
    assert np.linalg.norm(a.features - b.features) > 0


def test_unknown_genre_and_short_clip():
    with pytest.raises(mo.UnknownGenreError):
        mo.synth_clip(1, "polka", 0)
    with pytest.raises(mo.UnknownGenreError):
        mo.synth_corpus(1, ["polka"], 1)
    with pytest.raises(mo.SequenceTooShortError):
        mo.synth_corpus(1, ["jazz"], 1, clip_seconds=3.0)


def test_clip_invariants():
    seq, beats = mo.synth_clip(2, "popping", 1)
    contact = seq.slice("foot_contact")
    assert contact.min() >= 0 and contact.max() <= 1
    assert np.all(np.diff(beats.beat_times) > 0) and beats.tempo > 0
    assert beats.features.shape == (seq.frames, mo.MUSIC_DIM)
    # impulse channel is exactly 1 on the frame nearest each beat
    bf = np.round(beats.beat_times * seq.fps).astype(int)
    bf = bf[bf < seq.frames]
    assert np.allclose(beats.features[bf, 0], 1.0)
    others = np.setdiff1d(np.arange(seq.frames), bf)
    assert beats.features[others, 0].max() < 1.0


def test_motion_roundtrip(tmp_path):
    seq, beats = mo.synth_clip(4, "ballet", 2)
    mo.write_motion(tmp_path / "a.motion", seq)
    back = mo.read_motion(tmp_path / "a.motion")
    assert back.fps == seq.fps and back.features.tobytes() == seq.features.tobytes()
    mo.write_beats(tmp_path / "a.beats", beats)
    bb = mo.read_beats(tmp_path / "a.beats")
    assert np.array_equal(bb.beat_times, beats.beat_times)
    assert bb.features.tobytes() == beats.features.tobytes()


def test_motion_header_layout():
    seq = MotionSequence(np.zeros((3, 41)), 20)
    buf = mo.motion_to_bytes(seq)
    assert buf[:4] == b"DMOT"
    assert np.frombuffer(buf[4:20], "<u4").tolist() == [1, 20, 3, 41]
    assert len(buf) == 20 + 3 * 41 * 4


def test_corrupted_header_rejected(tmp_path):
    seq, _ = mo.synth_clip(4, "ballet", 0)
    buf = bytearray(mo.motion_to_bytes(seq))
    buf[4] ^= 0xFF
    with pytest.raises(mo.VersionError):
        mo.motion_from_bytes(bytes(buf))
    buf = bytearray(mo.motion_to_bytes(seq))
    buf[0] = ord("X")
    with pytest.raises(mo.FileFormatError):
        mo.motion_from_bytes(bytes(buf))
    with pytest.raises(mo.TruncatedFileError):
        mo.motion_from_bytes(mo.motion_to_bytes(seq)[:-5])


def test_empty_sequence_rejected():
    with pytest.raises(mo.MotionError):
        mo.motion_to_bytes(MotionSequence(np.zeros((0, 41))))


def test_constraint_roundtrip_and_zeroing(tmp_path):
    seq, _ = mo.synth_clip(4, "jazz", 0)
    c = mo.constraint_from_motion(seq, joints=[5, 8], frames=[0, 10, 20])
    assert c.count == 6
    assert not c.positions[~c.validity].any()
    mo.write_constraint(tmp_path / "c.pose", c)
    back = mo.read_constraint(tmp_path / "c.pose")
    assert np.array_equal(back.validity, c.validity)
    assert back.positions.tobytes() == c.positions.tobytes()
    raw = np.ones((4, 13, 3))
    v = np.zeros((4, 13), bool)
    v[1, 2] = True
    pc = mo.PoseConstraint(raw, v)
    assert pc.positions.sum() == 3.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["ballet", "hiphop", "popping", "jazz"]), st.integers(0, 50))
def test_synth_clip_foot_contacts_binary(seed, genre, index):
    seq, beats = mo.synth_clip(seed, genre, index, clip_seconds=3.2)
    c = seq.slice("foot_contact")
    assert set(np.unique(c)) <= {0.0, 1.0}
    assert np.isfinite(mo.joint_positions(seq)).all()
