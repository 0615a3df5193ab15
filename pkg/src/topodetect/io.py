"""File formats: TensorFile containers, PGM/PNG images, flat config files, manifests."""

from __future__ import annotations

import configparser
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TCD1"
TENSOR_SUFFIX = ".tcd"


class TensorFormatError(ValueError):
    """Malformed TensorFile (bad magic, header or payload length)."""


class ConfigError(ValueError):
    """Config file violates the typed schema."""


def write_tensor(path, arr) -> Path:
    """Write ``arr`` as little-endian float32 with a ``TCD1`` header (rank, dims as u32)."""
    arr = np.require(np.asarray(arr, dtype="<f4"), requirements="C")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))
    return path


def read_tensor(path) -> np.ndarray:
    """Read a TensorFile; returns a float64 array."""
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic, not a TensorFile")
    (rank,) = struct.unpack_from("<I", data, 4)
    header = 8 + 4 * rank
    if rank > 16 or len(data) < header:
        raise TensorFormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(data) - header != 4 * count:
        raise TensorFormatError(f"{path}: payload has {len(data) - header} bytes, dims {dims} need {4 * count}")
    return np.frombuffer(data, dtype="<f4", offset=header, count=count).reshape(dims).astype(np.float64)


def write_pgm(path, img, maxval: int = 255) -> Path:
    """Binary P5 PGM; values are clipped to [0, 1] and quantised to ``maxval``."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    if maxval not in (255, 65535):
        raise ValueError("PGM maxval must be 255 or 65535")
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    payload = q.astype(">u2" if maxval > 255 else "u1").tobytes()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii"))
        fh.write(payload)
    return path


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 PGM (8 or 16 bit) into a ``(1, H, W)`` array in [0, 1]."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: only binary P5 PGM is supported")
    width, height, maxval = (int(t) for t in tokens[1:])
    pos += 1  # single whitespace after maxval
    dtype = ">u2" if maxval > 255 else "u1"
    arr = np.frombuffer(data, dtype=dtype, offset=pos, count=width * height)
    return (arr.reshape(height, width).astype(np.float64) / maxval)[None]


def write_png(path, arr) -> Path:
    """Write a grayscale ``(H, W)`` in [0, 1] or an RGB ``(H, W, 3)`` uint8/float image."""
    from PIL import Image

    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        arr = np.rint(np.clip(arr, 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(arr).save(path)
    return Path(path)


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = np.moveaxis(arr[..., :3], -1, 0)
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    return arr.astype(np.float64) / scale


def load_image(path) -> np.ndarray:
    """Load a TensorFile, PGM or PNG as a ``(C, H, W)`` float array."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == TENSOR_SUFFIX:
        arr = read_tensor(path)
        return arr[None] if arr.ndim == 2 else arr
    if suffix == ".pgm":
        return read_pgm(path)
    if suffix == ".png":
        return read_png(path)
    raise ValueError(f"unsupported image format {suffix!r}")


def _coerce(name: str, raw: str, typ):
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    raw = raw.strip()
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ == "str":
            return raw
    except ValueError:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r} as {typ}") from None
    raise ConfigError(f"config key {name!r}: unsupported type {typ}")


def parse_config_text(text: str, schema: dict) -> dict:
    """Parse flat ``key = value`` lines (``#`` comments) against ``{key: type name}``."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        parser.read_string("[config]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    out = {}
    for key, raw in parser["config"].items():
        if key not in schema:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, raw, schema[key])
    return out


def load_config(path, cls):
    """Instantiate the dataclass ``cls`` from a flat config file; missing keys keep defaults."""
    values = parse_config_text(Path(path).read_text(), cls.field_types())
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())


def write_trace_csv(path, trace) -> Path:
    lines = ["iteration,elbo"] + [f"{i},{v:.10g}" for i, v in enumerate(trace)]
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def write_roc_csv(path, fpr, tpr) -> Path:
    lines = ["fpr,tpr"] + [f"{a:.6f},{b:.6f}" for a, b in zip(fpr, tpr)]
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)
