"""Binary and text file formats: checkpoints, descriptor files, match CSVs."""
from __future__ import annotations

import csv
import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

CKPT_MAGIC = b"REMM"
CKPT_VERSION = 1
DESC_MAGIC = b"REMMDESC1"
MATCH_HEADER = ("xA", "yA", "xB", "yB", "similarity", "inlier")


def save_checkpoint(path, params: Mapping[str, object]) -> None:
    """Write named float arrays (or Tensors) in the flat REMM layout."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(params)))
    for name, value in params.items():
        arr = np.asarray(getattr(value, "data", value), dtype="<f4")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a REMM checkpoint")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float32)
        off += 4 * size
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} trailing bytes")
    return out


def write_descriptors(path, keypoints: np.ndarray, descriptors: np.ndarray, g_size: int) -> None:
    """keypoints: (N, 4) rows of x, y, score, scale; descriptors: (N, D)."""
    kp = np.asarray(keypoints, dtype="<f4").reshape(-1, 4)
    desc = np.asarray(descriptors, dtype="<f4")
    if desc.ndim != 2 or len(desc) != len(kp):
        raise ValueError(f"descriptors {desc.shape} do not pair with {len(kp)} keypoints")
    head = DESC_MAGIC + struct.pack("<IHH", len(kp), g_size, desc.shape[1])
    Path(path).write_bytes(head + np.concatenate([kp, desc], axis=1).tobytes())


def read_descriptors(path) -> tuple[np.ndarray, np.ndarray, int]:
    blob = Path(path).read_bytes()
    if blob[:len(DESC_MAGIC)] != DESC_MAGIC:
        raise ValueError(f"{path}: not a REMMDESC1 file")
    count, g_size, dim = struct.unpack_from("<IHH", blob, len(DESC_MAGIC))
    body = np.frombuffer(blob, dtype="<f4", offset=len(DESC_MAGIC) + 8)
    if body.size != count * (4 + dim):
        raise ValueError(f"{path}: truncated descriptor payload")
    body = body.reshape(count, 4 + dim).astype(np.float32)
    return body[:, :4], body[:, 4:], g_size


def write_match_csv(path, pts_a, pts_b, similarity, inlier) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MATCH_HEADER)
        for (xa, ya), (xb, yb), s, f in zip(pts_a, pts_b, similarity, inlier):
            w.writerow([f"{xa:.4f}", f"{ya:.4f}", f"{xb:.4f}", f"{yb:.4f}", f"{s:.6f}", int(bool(f))])


def read_match_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows and tuple(rows[0]) == MATCH_HEADER:
        rows = rows[1:]
    arr = np.array([[float(v) for v in r] for r in rows], dtype=np.float64).reshape(-1, 6)
    return arr[:, 0:2], arr[:, 2:4], arr[:, 4], arr[:, 5].astype(bool)
