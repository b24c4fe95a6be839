"""Binary codecs: VTEN tensors, P5 PGM planes, P6 PPM images."""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import InputError

VTEN_MAGIC = b"VTEN"
VTEN_VERSION = 1


def write_vten(path, array) -> None:
    """Write a float array as VTEN; ranks below 4 are left-padded with ones."""
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim > 4:
        raise ValueError(f"VTEN holds at most rank 4, got {arr.ndim}")
    dims = (1,) * (4 - arr.ndim) + arr.shape
    with open(path, "wb") as fh:
        fh.write(VTEN_MAGIC)
        fh.write(struct.pack("<I4I", VTEN_VERSION, *dims))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_vten(path) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 24 or raw[:4] != VTEN_MAGIC:
        raise InputError(f"{path}: not a VTEN file")
    version, *dims = struct.unpack("<I4I", raw[4:24])
    if version != VTEN_VERSION:
        raise InputError(f"{path}: unsupported VTEN version {version}")
    count = int(np.prod(dims))
    body = raw[24:]
    if len(body) != 4 * count:
        raise InputError(f"{path}: expected {4 * count} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(dims).copy()


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def _parse_pnm(raw: bytes, path):
    """Return (magic, width, height, maxval, comments, payload)."""
    fields: list[bytes] = []
    comments: list[str] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise InputError(f"{path}: truncated header")
        if raw[pos:pos + 1] == b"#":
            end = raw.find(b"\n", pos)
            end = len(raw) if end < 0 else end
            comments.append(raw[pos + 1:end].decode("ascii", "replace").strip())
            pos = end + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic = fields[0].decode("ascii", "replace")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise InputError(f"{path}: malformed header") from exc
    return magic, width, height, maxval, comments, raw[pos:]


def write_ppm(path, rgb: np.ndarray) -> None:
    """``rgb`` is an (H, W, 3) uint8 array."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError("PPM writer expects an (H, W, 3) uint8 array")
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb).tobytes())


def read_ppm(path) -> np.ndarray:
    magic, w, h, maxval, _, body = _parse_pnm(_read_bytes(path), path)
    if magic != "P6" or maxval != 255:
        raise InputError(f"{path}: only 8-bit binary P6 is supported (got {magic}, maxval {maxval})")
    if len(body) < w * h * 3:
        raise InputError(f"{path}: truncated raster")
    return np.frombuffer(body[: w * h * 3], dtype=np.uint8).reshape(h, w, 3).copy()


def write_pgm(path, values: np.ndarray, bits: int) -> None:
    values = np.asarray(values)
    maxval = (1 << bits) - 1
    if values.ndim != 2 or values.min(initial=0) < 0 or values.max(initial=0) > maxval:
        raise ValueError(f"PGM writer expects a 2-D plane with values in [0, {maxval}]")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n# bits={bits}\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(values.astype(np.uint8).tobytes())


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Return (plane, bits). ``bits`` comes from the comment, else from maxval."""
    magic, w, h, maxval, comments, body = _parse_pnm(_read_bytes(path), path)
    if magic != "P5" or not 0 < maxval < 256:
        raise InputError(f"{path}: only 8-bit binary P5 is supported")
    bits = int(maxval).bit_length()
    for c in comments:
        if c.startswith("bits="):
            bits = int(c.split("=", 1)[1])
    if len(body) < w * h:
        raise InputError(f"{path}: truncated raster")
    return np.frombuffer(body[: w * h], dtype=np.uint8).reshape(h, w).copy(), bits


def image_to_u8(img) -> np.ndarray:
    """(3, H, W) or (1, 3, H, W) float image in [0, 1] -> (H, W, 3) uint8."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 4:
        arr = arr[0]
    return np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)


def u8_to_image(rgb: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float in [0, 1]."""
    return (np.asarray(rgb).transpose(2, 0, 1).astype(np.float64) / 255.0).astype(dtype)


def write_json(path, obj) -> None:
    """Deterministic JSON (sorted keys, fixed indentation, trailing newline)."""
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc


def ensure_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create {path}: {exc}") from exc
    if not os.access(p, os.W_OK):
        raise InputError(f"{path} is not writable")
    return p
