"""Parameter checkpoint container.

Layout: magic b"SRFCKPT1", a little-endian u32 byte length, a UTF-8 JSON
header listing [name, dtype, shape] per parameter in sorted name order, then
each parameter's raw little-endian bytes in that same order.
"""

import json
import struct

import numpy as np

from ..errors import FormatError, IoError

MAGIC = b"SRFCKPT1"

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(path, state):
    """Write a name -> ndarray mapping to `path`."""
    entries = []
    payloads = []
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name])
        tag = str(arr.dtype)
        if tag not in _DTYPES:
            raise FormatError(f"parameter {name!r} has unsupported dtype {tag}")
        entries.append([name, tag, list(arr.shape)])
        payloads.append(arr.astype(_DTYPES[tag], copy=False).tobytes())
    header = json.dumps(entries, separators=(",", ":")).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            for blob in payloads:
                fh.write(blob)
    except OSError as e:
        raise IoError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path):
    """Read a checkpoint back into a name -> ndarray mapping."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise IoError(f"cannot read checkpoint {path}: {e}") from e

    if raw[:8] != MAGIC:
        raise FormatError(f"bad magic at byte 0 in {path}")
    if len(raw) < 12:
        raise FormatError(f"truncated header length at byte 8 in {path}")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise FormatError(f"truncated header at byte 12 in {path}")
    try:
        entries = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable header at byte 12 in {path}: {e}") from e

    state = {}
    offset = 12 + hlen
    for entry in entries:
        if not (isinstance(entry, list) and len(entry) == 3):
            raise FormatError(f"malformed header entry {entry!r} in {path}")
        name, tag, shape = entry
        if tag not in _DTYPES:
            raise FormatError(f"parameter {name!r} has unsupported dtype {tag!r} in {path}")
        shape = tuple(int(s) for s in shape)
        count = 1
        for s in shape:
            count *= s
        nbytes = count * np.dtype(_DTYPES[tag]).itemsize
        if offset + nbytes > len(raw):
            raise FormatError(f"truncated payload for {name!r} at byte {offset} in {path}")
        arr = np.frombuffer(raw[offset:offset + nbytes], dtype=_DTYPES[tag]).reshape(shape)
        state[name] = arr.astype(tag)
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{len(raw) - offset} trailing bytes at byte {offset} in {path}")
    return state
