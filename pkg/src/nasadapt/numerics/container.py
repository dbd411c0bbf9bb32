"""Binary container for named float32 tensors.

Layout: the 4 magic bytes ``NAT1``, then for each tensor a little-endian
uint32 header length, a UTF-8 JSON header ``{"name", "dtype": "f32",
"shape"}``, and the row-major little-endian float32 payload. Round trips
are bit exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import ParameterError, ParseError

MAGIC = b"NAT1"


def save_tensors(path, named: dict[str, np.ndarray]) -> None:
    """Write named float32 arrays; names must be unique (dict enforces it)."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name, arr in named.items():
            arr = np.asarray(arr)
            if arr.dtype != np.float32:
                raise ParameterError(
                    f"container stores float32 only; tensor '{name}' has dtype {arr.dtype}")
            header = json.dumps(
                {"name": name, "dtype": "f32", "shape": list(arr.shape)},
                sort_keys=True).encode("utf-8")
            f.write(struct.pack("<I", len(header)))
            f.write(header)
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read a container back into an insertion-ordered name -> array dict."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ParseError(str(path), f"bad magic bytes {raw[:4]!r}, expected {MAGIC!r}")
    out: dict[str, np.ndarray] = {}
    pos = 4
    while pos < len(raw):
        if pos + 4 > len(raw):
            raise ParseError(str(path), "truncated header length")
        (hlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        if pos + hlen > len(raw):
            raise ParseError(str(path), "truncated header")
        try:
            header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ParseError(str(path), f"invalid tensor header: {exc}") from exc
        pos += hlen
        name, dtype, shape = header.get("name"), header.get("dtype"), header.get("shape")
        if dtype != "f32" or not isinstance(name, str) or not isinstance(shape, list):
            raise ParseError(str(path), f"malformed header {header}")
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if pos + nbytes > len(raw):
            raise ParseError(str(path), f"truncated payload for tensor '{name}'")
        arr = np.frombuffer(raw[pos:pos + nbytes], dtype="<f4").reshape(shape)
        pos += nbytes
        if name in out:
            raise ParseError(str(path), f"duplicate tensor name '{name}'")
        out[name] = arr.astype(np.float32, copy=True)
    return out
