"""On-disk formats: tensor containers, checkpoint bundles, P5 graymaps, episode manifests.

Tensor container layout (all integers little-endian)::

    b"FECA" | u32 version=1 | u8 dtype (0 = f32) | u8 rank | u64 dims[rank] | f32 payload

Checkpoint bundle layout::

    b"FECK" | u32 version=1 | u32 meta_len | meta JSON | u32 count |
    count x (u16 name_len | name utf-8 | u64 blob_len | container blob)
"""
from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError, ValidationError

MAGIC = b"FECA"
BUNDLE_MAGIC = b"FECK"
VERSION = 1
DTYPE_F32 = 0


def encode_tensor(arr) -> bytes:
    arr = np.asarray(getattr(arr, "data", arr))
    if arr.ndim > 255:
        raise FormatError(f"rank {arr.ndim} exceeds container limit")
    head = MAGIC + struct.pack("<IBB", VERSION, DTYPE_F32, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tensor(buf: bytes, where: str = "<buffer>") -> tuple[np.ndarray, int]:
    """Decode one container from the start of ``buf``; returns (array, bytes consumed)."""
    if len(buf) < 10:
        raise FormatError(f"{where}: header truncated ({len(buf)} bytes)")
    if buf[:4] != MAGIC:
        raise FormatError(f"{where}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    version, dtype, rank = struct.unpack_from("<IBB", buf, 4)
    if version != VERSION:
        raise FormatError(f"{where}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"{where}: unsupported dtype code {dtype}")
    off = 10
    if len(buf) < off + 8 * rank:
        raise FormatError(f"{where}: dims truncated")
    dims = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    need = 4 * math.prod(dims)
    have = len(buf) - off
    if have < need:
        raise FormatError(f"{where}: payload truncated, expected {need} bytes, found {have}")
    arr = np.frombuffer(buf, dtype="<f4", count=math.prod(dims), offset=off).reshape(dims)
    return arr.astype(np.float32), off + need


def write_tensor(path, t) -> None:
    Path(path).write_bytes(encode_tensor(t))


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, used = decode_tensor(buf, str(path))
    if used != len(buf):
        raise FormatError(f"{path}: {len(buf) - used} trailing bytes after payload")
    return arr


def write_bundle(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [BUNDLE_MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        nb = name.encode()
        blob = encode_tensor(arr)
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<Q", len(blob)), blob]
    Path(path).write_bytes(b"".join(parts))


def read_bundle(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    try:
        if buf[:4] != BUNDLE_MAGIC:
            raise FormatError(f"{path}: bad bundle magic {buf[:4]!r}")
        version, meta_len = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported bundle version {version}")
        off = 12
        meta = json.loads(buf[off:off + meta_len].decode())
        off += meta_len
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode()
            off += nlen
            (blen,) = struct.unpack_from("<Q", buf, off)
            off += 8
            arr, used = decode_tensor(buf[off:off + blen], f"{path}:{name}")
            if used != blen:
                raise FormatError(f"{path}:{name}: blob length mismatch")
            out[name] = arr
            off += blen
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt bundle ({exc})") from None
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes")
    return out, meta


# -- graymaps ---------------------------------------------------------------
def write_pgm(path, mask: np.ndarray) -> None:
    """Binary mask -> P5 graymap with 0 = background, 255 = foreground."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValidationError(f"mask must be 2D, got shape {mask.shape}")
    h, w = mask.shape
    pixels = np.where(mask > 0, 255, 0).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit P5 graymap as a uint8 array [H, W]."""
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated graymap header")
        tokens.append(buf[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a P5 graymap")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit graymaps supported, maxval {maxval}")
    data = buf[pos:pos + w * h]
    if len(data) != w * h:
        raise FormatError(f"{path}: pixel data truncated, expected {w * h} bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def read_mask(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        raw = read_pgm(path)
        if not np.isin(raw, (0, 255)).all():
            raise ValidationError(f"{path}: mask pixels must be 0 or 255")
        return (raw == 255).astype(np.uint8)
    arr = read_tensor(path)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2 or not np.isin(arr, (0.0, 1.0)).all():
        raise ValidationError(f"{path}: container mask must be a 2D 0/1 map")
    return arr.astype(np.uint8)


# -- manifests --------------------------------------------------------------
def load_manifest(path):
    """Parse an episode manifest; relative paths resolve against its directory."""
    from .pipeline.episode import Episode

    path = Path(path)
    doc = json.loads(path.read_text())
    entries = doc["episodes"] if isinstance(doc, dict) else doc
    base = path.parent
    episodes = []
    for i, e in enumerate(entries):
        try:
            supports = [(read_tensor(base / s["image"]), read_mask(base / s["mask"])) for s in e["supports"]]
            episodes.append(Episode(supports, read_tensor(base / e["query_image"]), read_mask(base / e["query_mask"]),
                                    int(e["class_id"]), str(e["query_id"])))
        except KeyError as exc:
            raise ValidationError(f"{path}: episode {i} lacks field {exc}") from None
    return episodes


def write_manifest(episodes, out_dir) -> Path:
    """Write every image/mask of ``episodes`` under ``out_dir`` plus manifest.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, ep in enumerate(episodes):
        stem = f"ep{i:03d}"
        write_tensor(out / f"{stem}_query.feca", ep.query_image)
        write_pgm(out / f"{stem}_query_mask.pgm", ep.query_mask)
        sup = []
        for j, (img, mask) in enumerate(ep.supports):
            write_tensor(out / f"{stem}_support{j}.feca", img)
            write_pgm(out / f"{stem}_support{j}_mask.pgm", mask)
            sup.append({"image": f"{stem}_support{j}.feca", "mask": f"{stem}_support{j}_mask.pgm"})
        entries.append({"class_id": int(ep.class_id), "query_id": ep.query_id,
                        "query_image": f"{stem}_query.feca", "query_mask": f"{stem}_query_mask.pgm",
                        "supports": sup})
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"episodes": entries}, indent=2, sort_keys=True) + "\n")
    return manifest


def export_mask(pred, path) -> None:
    """Hard mask of a prediction (or a raw binary array) as a P5 graymap."""
    write_pgm(path, getattr(pred, "mask", pred))
