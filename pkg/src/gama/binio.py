"""Little-endian binary framing shared by datasets, checkpoints, and banks.

Every artifact ends with a CRC32 of all preceding bytes, so truncation
and bit flips are caught at load time. Writes go through a temp file in
the destination directory followed by an atomic rename.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .errors import DataFormatError

CHECKPOINT_MAGIC = b"GAMC"
CHECKPOINT_VERSION = 1
MODEL_KINDS = {"surrogate": 0, "encoder": 1, "generator": 2}
KIND_NAMES = {v: k for k, v in MODEL_KINDS.items()}


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json_sidecar(path: str | Path, meta: dict) -> Path:
    side = Path(str(path) + ".json")
    atomic_write_text(side, json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return side


def read_json_sidecar(path: str | Path) -> dict:
    side = Path(str(path) + ".json")
    if not side.exists():
        raise DataFormatError(f"missing metadata sidecar {side}")
    try:
        return json.loads(side.read_text("utf-8"))
    except json.JSONDecodeError as e:
        raise DataFormatError(f"corrupt metadata sidecar {side}: {e}") from e


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def payload_crc32(path: str | Path) -> str:
    # CRC over everything but the stored trailer. A whole-file CRC32 of a
    # file that ends with its own CRC is the constant residue 0x2144df1c,
    # useless as a fingerprint.
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise DataFormatError(f"{path} too short to carry a checksum trailer")
    return f"{zlib.crc32(data[:-4]):08x}"


def write_tensor_record(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    nm = name.encode("utf-8")
    if len(nm) > 0xFFFF:
        raise ValueError("tensor name too long")
    buf.write(struct.pack("<H", len(nm)))
    buf.write(nm)
    buf.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<I", d))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataFormatError(f"truncated {self.what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_tensor_record(r: _Reader) -> tuple[str, np.ndarray]:
    (nlen,) = r.unpack("<H")
    name = r.take(nlen).decode("utf-8")
    (ndim,) = r.unpack("<B")
    shape = tuple(r.unpack("<I")[0] for _ in range(ndim))
    count = 1
    for d in shape:
        count *= d
    arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).copy()
    return name, arr


def save_checkpoint(path: str | Path, kind: str, architecture_id: int,
                    named_tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Serialize named float32 tensors plus a JSON metadata sidecar."""
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    buf.write(struct.pack("<B", MODEL_KINDS[kind]))
    buf.write(struct.pack("<H", architecture_id))
    buf.write(struct.pack("<I", len(named_tensors)))
    for name, arr in named_tensors.items():
        write_tensor_record(buf, name, arr)
    payload = buf.getvalue()
    crc = zlib.crc32(payload)
    atomic_write_bytes(path, payload + struct.pack("<I", crc))
    write_json_sidecar(path, dict(meta, kind=kind, architecture_id=architecture_id))


def load_checkpoint(path: str | Path) -> tuple[str, int, dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"no such checkpoint {path}")
    data = path.read_bytes()
    if len(data) < 17:
        raise DataFormatError(f"truncated checkpoint {path}")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) != stored_crc:
        raise DataFormatError(f"checksum mismatch in {path}")
    r = _Reader(data[:-4], f"checkpoint {path}")
    if r.take(4) != CHECKPOINT_MAGIC:
        raise DataFormatError(f"bad magic in {path}")
    (version,) = r.unpack("<H")
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version} in {path}")
    (kind_byte,) = r.unpack("<B")
    if kind_byte not in KIND_NAMES:
        raise DataFormatError(f"unknown model kind byte {kind_byte} in {path}")
    (arch_id,) = r.unpack("<H")
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name, arr = read_tensor_record(r)
        tensors[name] = arr
    if r.pos != len(r.data):
        raise DataFormatError(f"trailing bytes in {path}")
    meta = read_json_sidecar(path)
    return KIND_NAMES[kind_byte], arch_id, tensors, meta
