"""File formats shared across the repo.

* checkpoints: magic "LPHCKPT1", u32 format version, length-prefixed UTF-8
  architecture descriptor, then per-parameter records
  (name, rank, dims as u32 LE, raw little-endian float32 payload),
* images: binary PPM (P6), bit-exact across platforms,
* small CSV / JSON-lines helpers used by training logs and reports.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"LPHCKPT1"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, descriptor, arrays):
    """Write named float arrays (iterated in sorted name order)."""
    path = Path(path)
    desc = descriptor.encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(desc)))
        f.write(desc)
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.tobytes())


def load_checkpoint(path):
    """Return (descriptor, {name: float32 array})."""
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    off = 8
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (dlen,) = struct.unpack_from("<I", data, off)
    off += 4
    descriptor = data[off:off + dlen].decode("utf-8")
    off += dlen
    arrays = {}
    while off < len(data):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(dims).copy()
        off += 4 * count
        arrays[name] = arr
    return descriptor, arrays


def checkpoint_checksum(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# PPM (P6) images

def save_ppm(path, image, comment=None):
    """image: float array (H, W, 3) in [0, 1] or uint8; rounding is fixed."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    h, w = img.shape[:2]
    header = f"P6\n".encode()
    if comment:
        for line in comment.splitlines():
            header += f"# {line}\n".encode()
    header += f"{w} {h}\n255\n".encode()
    Path(path).write_bytes(header + img.tobytes())


def load_ppm(path):
    """Return float32 (H, W, 3) image in [0, 1]."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos] in b" \t\r\n":
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos] not in b" \t\r\n":
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    img = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3)
    return img.astype(np.float32) / float(maxval)


# ---------------------------------------------------------------------------
# CSV / JSONL

def write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_csv_cell(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def _csv_cell(v):
    if isinstance(v, float):
        return format(v, ".10g")
    return str(v)


def append_csv_row(path, header, row):
    path = Path(path)
    if not path.exists():
        path.write_text(",".join(header) + "\n")
    with open(path, "a") as f:
        f.write(",".join(_csv_cell(v) for v in row) + "\n")


def read_csv(path):
    lines = Path(path).read_text().strip().splitlines()
    if not lines:
        return [], []
    header = lines[0].split(",")
    rows = [line.split(",") for line in lines[1:]]
    return header, rows


def write_jsonl(path, records):
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
