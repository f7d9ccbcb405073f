"""Checkpoint container: one flat binary blob plus a plain-text manifest.

Layout of a checkpoint directory::

    manifest.txt   text, one record per line
    tensors.bin    raw little-endian array bytes, C order, back to back

``manifest.txt`` starts with ``memgate-checkpoint 1``. Then come ``meta
<key> <value>`` lines (integers, floats or JSON-free strings), then one
``tensor <name> <dtype> <shape> <offset> <nbytes>`` line per array. Here
``dtype`` is ``float32``, ``float64`` or ``int64``, ``shape`` is a
comma-separated list (``-`` for a scalar) and ``offset`` is in bytes from
the start of ``tensors.bin``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from memgate.errors import ContractViolation

MAGIC = "memgate-checkpoint 1"
MANIFEST = "manifest.txt"
BLOB = "tensors.bin"
DTYPES = ("float32", "float64", "int64")


def _fmt_shape(shape) -> str:
    return ",".join(str(n) for n in shape) if shape else "-"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "-" else tuple(int(n) for n in text.split(","))


def _parse_value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def save_checkpoint(directory, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [MAGIC]
    for key, value in (meta or {}).items():
        text = repr(value) if isinstance(value, float) else str(value)
        if any(c.isspace() for c in str(key) + text):
            raise ContractViolation(f"meta entry {key!r} contains whitespace")
        lines.append(f"meta {key} {text}")
    offset = 0
    with (directory / BLOB).open("wb") as fh:
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            if arr.dtype.name not in DTYPES:
                raise ContractViolation(f"{name}: unsupported dtype {arr.dtype}")
            if any(c.isspace() for c in name):
                raise ContractViolation(f"tensor name {name!r} contains whitespace")
            raw = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
            fh.write(raw)
            lines.append(f"tensor {name} {arr.dtype.name} {_fmt_shape(arr.shape)} {offset} {len(raw)}")
            offset += len(raw)
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")
    return directory


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    lines = (directory / MANIFEST).read_text().splitlines()
    if not lines or lines[0] != MAGIC:
        raise ContractViolation(f"{directory / MANIFEST} is not a memgate checkpoint manifest")
    blob = (directory / BLOB).read_bytes()
    tensors, meta = {}, {}
    for line in lines[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "meta" and len(parts) == 3:
            meta[parts[1]] = _parse_value(parts[2])
        elif parts[0] == "tensor" and len(parts) == 6:
            _, name, dtype, shape, offset, nbytes = parts
            offset, nbytes = int(offset), int(nbytes)
            if dtype not in DTYPES or offset + nbytes > len(blob):
                raise ContractViolation(f"bad manifest entry: {line!r}")
            arr = np.frombuffer(blob, dtype=np.dtype(dtype).newbyteorder("<"), count=nbytes // np.dtype(dtype).itemsize,
                                offset=offset)
            tensors[name] = arr.astype(dtype).reshape(_parse_shape(shape))
        else:
            raise ContractViolation(f"unrecognized manifest line: {line!r}")
    return tensors, meta
