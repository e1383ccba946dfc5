"""File formats: binary PPM images, RTEN tensor blobs and checkpoints.

RTEN layout (little-endian)::

    b"RTEN" | version u32 | rank u32 | dims u32 * rank | float32 * prod(dims)

A checkpoint is a UTF-8 text manifest followed by concatenated RTEN blobs::

    RIRNCKPT 1
    config.<key> = <value>        (sorted by key)
    epoch = <int>
    adam_step = <int>
    tensor <name> <d0>x<d1>x... <offset> <length>   (sorted by name)
    end
    <payload>

Offsets are relative to the first payload byte. Tensor names are model
parameter names plus ``adam.m/<name>`` and ``adam.v/<name>`` moments.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "FormatError",
    "CheckpointError",
    "read_image",
    "write_image",
    "encode_ppm",
    "decode_ppm",
    "to_bytes8",
    "encode_rten",
    "decode_rten",
    "save_tensor",
    "load_tensor",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
]

RTEN_MAGIC = b"RTEN"
RTEN_VERSION = 1
CKPT_MAGIC = "RIRNCKPT"
CKPT_VERSION = 1


class FormatError(ValueError):
    """Malformed or truncated file."""


class CheckpointError(ValueError):
    """Checkpoint incompatible with the requested model."""


# ---------------------------------------------------------------------------
# PPM


def _ppm_tokens(buf):
    """Yield (token, end_offset) for the four header fields of a P6 file."""
    pos = 0
    n = len(buf)
    tokens = []
    while len(tokens) < 4:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("PPM header truncated")
        tokens.append(buf[start:pos])
    if pos >= n or not buf[pos : pos + 1].isspace():
        raise FormatError("PPM header must end with a single whitespace byte")
    return tokens, pos + 1


def decode_ppm(buf):
    """Decode P6 bytes into an ``(h, w, 3)`` uint8 array."""
    tokens, offset = _ppm_tokens(buf)
    if tokens[0] != b"P6":
        raise FormatError(f"not a binary PPM (magic {tokens[0]!r}, expected b'P6')")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"PPM header has non-integer fields: {tokens[1:]}") from None
    if width < 1 or height < 1:
        raise FormatError(f"PPM dimensions must be positive, got {width}x{height}")
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    need = width * height * 3
    payload = buf[offset : offset + need]
    if len(payload) < need:
        raise FormatError(f"PPM payload truncated: expected {need} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)


def encode_ppm(pixels):
    """Encode an ``(h, w, 3)`` uint8 array as P6 bytes."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w, c = pixels.shape
    if c != 3:
        raise FormatError(f"PPM needs 3 channels, got {c}")
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def to_bytes8(values):
    """Clamp to ``[0, 1]`` and round half up onto the 8-bit grid."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def read_image(path, dtype=np.float32):
    """Read a P6 file as a ``(1, 3, h, w)`` array in ``[0, 1]``."""
    pixels = decode_ppm(Path(path).read_bytes())
    return (pixels.transpose(2, 0, 1)[None].astype(np.float64) / 255.0).astype(dtype)


def write_image(path, image):
    """Write a ``(1, 3, h, w)`` or ``(3, h, w)`` array (or tensor) as P6."""
    arr = np.asarray(getattr(image, "data", image))
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise FormatError(f"write_image takes a single image, got batch {arr.shape[0]}")
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise FormatError(f"write_image expects (3, h, w), got {arr.shape}")
    Path(path).write_bytes(encode_ppm(to_bytes8(arr).transpose(1, 2, 0)))


# ---------------------------------------------------------------------------
# RTEN


def encode_rten(arr):
    arr = np.asarray(arr)
    header = RTEN_MAGIC + struct.pack("<II", RTEN_VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_rten(buf):
    if len(buf) < 12 or buf[:4] != RTEN_MAGIC:
        raise FormatError("not an RTEN blob (bad magic)")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != RTEN_VERSION:
        raise FormatError(f"unsupported RTEN version {version}")
    end = 12 + 4 * rank
    if len(buf) < end:
        raise FormatError("RTEN header truncated")
    dims = struct.unpack_from(f"<{rank}I", buf, 12)
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) < end + 4 * count:
        raise FormatError(f"RTEN payload truncated: expected {4 * count} bytes")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=end).astype(np.float32).reshape(dims)


def save_tensor(path, arr):
    Path(path).write_bytes(encode_rten(getattr(arr, "data", arr)))


def load_tensor(path):
    return decode_rten(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: dict
    tensors: dict = field(default_factory=dict)
    epoch: int = 0
    adam_step: int = 0


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse_value(s):
    if s == "true":
        return True
    if s == "false":
        return False
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def encode_checkpoint(ckpt):
    lines = [f"{CKPT_MAGIC} {CKPT_VERSION}"]
    for key in sorted(ckpt.config):
        value = _format_value(ckpt.config[key])
        if "\n" in value or "\n" in key:
            raise ValueError(f"config entry {key!r} contains a newline")
        lines.append(f"config.{key} = {value}")
    lines.append(f"epoch = {int(ckpt.epoch)}")
    lines.append(f"adam_step = {int(ckpt.adam_step)}")
    payload = io.BytesIO()
    for name in sorted(ckpt.tensors):
        if any(ch.isspace() for ch in name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
        arr = np.asarray(ckpt.tensors[name])
        blob = encode_rten(arr)
        dims = "x".join(str(d) for d in arr.shape) or "scalar"
        lines.append(f"tensor {name} {dims} {payload.tell()} {len(blob)}")
        payload.write(blob)
    lines.append("end")
    return ("\n".join(lines) + "\n").encode("utf-8") + payload.getvalue()


def decode_checkpoint(buf):
    marker = b"\nend\n"
    cut = buf.find(marker)
    if cut < 0:
        raise FormatError("checkpoint manifest has no end line")
    header = buf[:cut].decode("utf-8").split("\n")
    payload = buf[cut + len(marker) :]
    first = header[0].split()
    if len(first) != 2 or first[0] != CKPT_MAGIC:
        raise FormatError("not a checkpoint file")
    if first[1] != str(CKPT_VERSION):
        raise CheckpointError(f"checkpoint version {first[1]} not supported (expected {CKPT_VERSION})")
    ckpt = Checkpoint(config={})
    for line in header[1:]:
        if line.startswith("tensor "):
            parts = line.split()
            if len(parts) != 5:
                raise FormatError(f"bad tensor manifest line: {line!r}")
            _, name, dims, offset, length = parts
            offset, length = int(offset), int(length)
            if offset + length > len(payload):
                raise FormatError(f"tensor {name!r} runs past end of file")
            arr = decode_rten(payload[offset : offset + length])
            shape = () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))
            if arr.shape != shape:
                raise FormatError(f"tensor {name!r}: manifest shape {shape} disagrees with blob {arr.shape}")
            if name in ckpt.tensors:
                raise FormatError(f"duplicate tensor {name!r}")
            ckpt.tensors[name] = arr
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise FormatError(f"bad manifest line: {line!r}")
        if key.startswith("config."):
            ckpt.config[key[len("config.") :]] = _parse_value(value)
        elif key == "epoch":
            ckpt.epoch = int(value)
        elif key == "adam_step":
            ckpt.adam_step = int(value)
        else:
            raise FormatError(f"unknown manifest key {key!r}")
    return ckpt


def save_checkpoint(path, ckpt):
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())
