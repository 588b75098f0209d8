"""Binary checkpoint container: named sections of float32 tensors with a trailing CRC32."""
from __future__ import annotations

import hashlib
import struct
import zlib

import numpy as np

MAGIC = b"DMSK"
VERSION = 1


class CheckpointError(Exception):
    pass


def pack(header: str, sections: dict[str, dict[str, np.ndarray]]) -> bytes:
    """Serialise ``sections`` (ordered) behind a UTF-8 header text."""
    out = bytearray(MAGIC)
    text = header.encode("utf-8")
    out += struct.pack("<II", VERSION, len(text)) + text
    out += struct.pack("<I", len(sections))
    for sname, tensors in sections.items():
        raw = sname.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw + struct.pack("<I", len(tensors))
        for tname, arr in tensors.items():
            a = np.asarray(arr, dtype="<f4")
            raw = tname.encode("utf-8")
            out += struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim)
            out += struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes(order="C")
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def unpack(buf: bytes) -> tuple[str, dict[str, dict[str, np.ndarray]]]:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    r = _Reader(body)
    r.take(4)
    version, hlen = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = r.take(hlen).decode("utf-8")
    (count,) = r.unpack("<I")
    sections: dict[str, dict[str, np.ndarray]] = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        sname = r.take(n).decode("utf-8")
        if sname in sections:
            raise CheckpointError(f"duplicate section {sname!r}")
        (nt,) = r.unpack("<I")
        tensors = {}
        for _ in range(nt):
            (n,) = r.unpack("<H")
            tname = r.take(n).decode("utf-8")
            (ndim,) = r.unpack("<B")
            shape = r.unpack(f"<{ndim}I")
            size = int(np.prod(shape)) if ndim else 1
            tensors[tname] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        sections[sname] = tensors
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after last section")
    return header, sections


def save(path, header: str, sections) -> None:
    data = pack(header, sections)
    with open(path, "wb") as fh:
        fh.write(data)


def load(path):
    try:
        with open(path, "rb") as fh:
            return unpack(fh.read())
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint: {e}") from None


def file_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def tensors_digest(tensors: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensors[name], dtype="<f4").tobytes())
    return h.hexdigest()
