import os
import subprocess
import sys

import numpy as np
import pytest

from maskdance import motion as mo
from maskdance.cli import EXIT_CHECKPOINT, EXIT_DATA, EXIT_OK, EXIT_USAGE, main

from helpers import tiny_config


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """gen-data plus all four training stages at a tiny size, driven through the CLI."""
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "tiny.cfg"
    cfg.write_text(tiny_config().to_text())
    data = str(d / "data")
    assert main(["gen-data", "--out", data, "--clips", "2", "--seconds", "3.2"]) == EXIT_OK
    ck = {}
    prev = None
    for stage in ("tokenizer", "t2m", "music", "pose"):
        out = str(d / f"{stage}.dmsk")
        argv = ["train", stage, "--config", str(cfg), "--data", data, "--out", out, "--steps", "2"]
        if prev:
            argv += ["--init", prev]
        assert main(argv) == EXIT_OK
        ck[stage] = prev = out
    return d, str(cfg), data, ck


def test_train_writes_loss_log_and_state(workspace):
    d, _, _, ck = workspace
    lines = open(ck["t2m"] + ".loss.csv").read().splitlines()
    assert lines[0].startswith("step,") and len(lines) == 3
    assert os.path.exists(ck["pose"] + ".state")


def test_generate_and_determinism(workspace):
    d, _, data, ck = workspace
    beats = os.path.join(data, "hiphop_000.beats")
    outs = []
    for name in ("a", "b"):
        out = str(d / f"gen_{name}.motion")
        assert main(["generate", "--checkpoint", ck["pose"], "--beats", beats, "--genre", "hiphop",
                     "--frames", "32", "--seed", "5", "--out", out, "--trace", out + ".csv"]) == EXIT_OK
        outs.append(out)
    a, b = (open(p, "rb").read() for p in outs)
    assert a == b
    assert mo.read_motion(outs[0]).frames == 32
    assert open(outs[0] + ".log").read().startswith("# ")
    with pytest.warns(UserWarning, match="rounded"):
        assert main(["generate", "--checkpoint", ck["t2m"], "--genre", "jazz", "--frames", "30",
                     "--out", str(d / "r.motion")]) == EXIT_OK
    assert mo.read_motion(str(d / "r.motion")).frames == 32


def test_edit_modes(workspace):
    d, _, data, ck = workspace
    src = os.path.join(data, "jazz_001.motion")
    seq = mo.read_motion(src)
    cpath = str(d / "c.constraint")
    mo.write_constraint(cpath, mo.constraint_from_motion(seq, [9, 10], range(0, 64, 4)))
    assert main(["edit", "--mode", "spatial", "--checkpoint", ck["pose"], "--motion", src,
                 "--constraints", cpath, "--genre", "jazz", "--out", str(d / "s.motion")]) == EXIT_OK
    assert main(["edit", "--mode", "temporal", "--checkpoint", ck["t2m"], "--motion", src, "--genre", "jazz",
                 "--keep-ranges", "0:16,48:64", "--out", str(d / "t.motion")]) == EXIT_OK
    assert mo.read_motion(str(d / "t.motion")).frames == 64
    # spatial editing needs the pose adapter
    assert main(["edit", "--mode", "spatial", "--checkpoint", ck["t2m"], "--motion", src,
                 "--constraints", cpath, "--out", str(d / "x.motion")]) == EXIT_CHECKPOINT
    assert main(["edit", "--mode", "temporal", "--checkpoint", ck["t2m"], "--motion", src, "--genre", "jazz",
                 "--keep-ranges", "0:40,20:64", "--out", str(d / "x.motion")]) == EXIT_USAGE


def test_stitch_and_eval(workspace):
    d, cfg, data, ck = workspace
    seg = d / "segs.txt"
    seg.write_text(f"ballet,{os.path.join(data, 'ballet_000.beats')},32\njazz,,24\n")
    out = str(d / "gen" / "long.motion")
    os.makedirs(d / "gen", exist_ok=True)
    assert main(["stitch", "--checkpoint", ck["music"], "--segments", str(seg), "--overlap", "2",
                 "--out", out]) == EXIT_OK
    assert mo.read_motion(out).frames == 56
    main(["generate", "--checkpoint", ck["t2m"], "--genre", "ballet", "--frames", "64",
          "--out", str(d / "gen" / "ballet_000.motion")])
    report = str(d / "report.txt")
    assert main(["eval", "--config", cfg, "--gen", str(d / "gen"), "--ref", data, "--report", report]) == EXIT_OK
    vals = dict(line.split("=") for line in open(report).read().splitlines() if not line.startswith("#"))
    assert list(vals) == ["fid_k", "fid_g", "div_k", "div_g", "bas", "pfc", "fsr"]
    assert np.isnan(float(vals["bas"])) and float(vals["pfc"]) >= 0
    rows = open(report + ".csv").read().splitlines()
    assert rows[0] == "clip,bas,pfc,fsr" and len(rows) == 3
    # missing beat tracks for a generated clip are a data error
    assert main(["eval", "--gen", str(d / "gen"), "--ref", data, "--beats", data,
                 "--report", report]) == EXIT_DATA


def test_exit_codes(workspace, tmp_path):
    d, cfg, data, ck = workspace
    assert main([]) == EXIT_USAGE
    assert main(["train", "bogus", "--data", data, "--out", "x"]) == EXIT_USAGE
    assert main(["gen-data", "--out", data]) == EXIT_USAGE
    assert main(["gen-data", "--out", str(tmp_path / "g"), "--genres", "polka"]) == EXIT_USAGE
    assert main(["generate", "--checkpoint", ck["t2m"], "--out", str(tmp_path / "o.motion")]) == EXIT_USAGE
    assert main(["generate", "--checkpoint", ck["t2m"], "--genre", "jazz", "--set", "bogus=1",
                 "--out", str(tmp_path / "o.motion")]) == EXIT_USAGE
    assert main(["generate", "--checkpoint", ck["t2m"], "--genre", "jazz", "--set", "width=32",
                 "--out", str(tmp_path / "o.motion")]) == EXIT_USAGE
    bad = tmp_path / "bad.dmsk"
    raw = bytearray(open(ck["t2m"], "rb").read())
    raw[40] ^= 0xFF
    bad.write_bytes(bytes(raw))
    assert main(["generate", "--checkpoint", str(bad), "--genre", "jazz",
                 "--out", str(tmp_path / "o.motion")]) == EXIT_CHECKPOINT
    assert main(["generate", "--checkpoint", str(tmp_path / "none.dmsk"), "--genre", "jazz",
                 "--out", str(tmp_path / "o.motion")]) == EXIT_CHECKPOINT
    assert main(["train", "t2m", "--data", data, "--out", str(tmp_path / "z.dmsk")]) == EXIT_CHECKPOINT
    assert main(["train", "music", "--config", cfg, "--data", data, "--init", ck["tokenizer"],
                 "--out", str(tmp_path / "z.dmsk")]) == EXIT_CHECKPOINT
    assert main(["train", "tokenizer", "--config", cfg, "--data", str(tmp_path / "nodata"),
                 "--out", str(tmp_path / "z.dmsk")]) == EXIT_DATA
    junk = tmp_path / "junk.motion"
    junk.write_bytes(b"garbage")
    assert main(["edit", "--mode", "temporal", "--checkpoint", ck["t2m"], "--motion", str(junk), "--genre", "jazz",
                 "--keep-ranges", "0:16", "--out", str(tmp_path / "o.motion")]) == EXIT_DATA


def test_thread_limit_env(workspace, monkeypatch, tmp_path):
    _, _, _, ck = workspace
    monkeypatch.setenv("DMSK_THREADS", "zero")
    assert main(["generate", "--checkpoint", ck["t2m"], "--genre", "jazz",
                 "--out", str(tmp_path / "o.motion")]) == EXIT_USAGE
    monkeypatch.setenv("DMSK_THREADS", "1")
    assert main(["generate", "--checkpoint", ck["t2m"], "--genre", "jazz", "--frames", "16",
                 "--out", str(tmp_path / "o.motion")]) == EXIT_OK


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "maskdance.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen-data" in r.stdout
