"""Plain-text manifest plus one raw little-endian float64 blob.

Layout of a checkpoint directory::

    manifest.txt   format line, module versions, ``meta`` lines (JSON values),
                   one ``array <name> <kind> <shape> <offset> <nbytes>`` line
                   per array, and the blob's sha256
    arrays.bin     all arrays concatenated as ``<f8``

Integer and boolean arrays are stored as float64 and cast back on load; this
is exact for magnitudes below 2**53.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import scipy
import sklearn

from .exceptions import CheckpointError

FORMAT = "crossprompt-checkpoint 1"
MANIFEST = "manifest.txt"
BLOB = "arrays.bin"
_KINDS = {"f": "float64", "i": "int64", "u": "int64", "b": "bool"}


def _package_version() -> str:
    from . import __version__

    return __version__


def _shape_str(shape) -> str:
    return "x".join(str(s) for s in shape) if shape else "-"


def _parse_shape(text: str) -> tuple:
    return () if text == "-" else tuple(int(s) for s in text.split("x"))


def save_arrays(directory, arrays: dict[str, np.ndarray], meta: dict | None = None) -> str:
    """Write ``arrays`` and ``meta`` to ``directory``; return the manifest sha256."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = meta or {}
    lines = [
        f"format {FORMAT}",
        f"module crossprompt {_package_version()}",
        f"module numpy {np.__version__}",
        f"module scipy {scipy.__version__}",
        f"module scikit-learn {sklearn.__version__}",
    ]
    for key in sorted(meta):
        if any(c.isspace() for c in key):
            raise CheckpointError(f"meta key {key!r} contains whitespace")
        lines.append(f"meta {key} {json.dumps(meta[key], sort_keys=True)}")
    chunks, offset = [], 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        if any(c.isspace() for c in name):
            raise CheckpointError(f"array name {name!r} contains whitespace")
        kind = _KINDS.get(a.dtype.kind)
        if kind is None:
            raise CheckpointError(f"{name}: unsupported dtype {a.dtype}")
        raw = np.ascontiguousarray(a, dtype="<f8").tobytes()
        lines.append(f"array {name} {kind} {_shape_str(a.shape)} {offset} {len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    lines.append(f"blob {BLOB} sha256 {hashlib.sha256(blob).hexdigest()}")
    text = "\n".join(lines) + "\n"
    (directory / BLOB).write_bytes(blob)
    (directory / MANIFEST).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_arrays(directory) -> tuple[dict[str, np.ndarray], dict]:
    """Inverse of :func:`save_arrays`. Verifies the blob checksum."""
    directory = Path(directory)
    try:
        text = (directory / MANIFEST).read_text()
        blob = (directory / BLOB).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint in {directory}: {exc}") from exc
    lines = text.splitlines()
    if not lines or lines[0] != f"format {FORMAT}":
        raise CheckpointError("unrecognised checkpoint format")
    arrays, meta, digest = {}, {}, None
    for line in lines[1:]:
        head, _, rest = line.partition(" ")
        if head == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = json.loads(value)
        elif head == "array":
            name, kind, shape, offset, nbytes = rest.split(" ")
            offset, nbytes = int(offset), int(nbytes)
            if offset + nbytes > len(blob):
                raise CheckpointError(f"{name}: blob is truncated")
            data = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=offset)
            arrays[name] = data.reshape(_parse_shape(shape)).astype(kind)
        elif head == "blob":
            digest = rest.split(" ")[-1]
        elif head != "module":
            raise CheckpointError(f"unexpected manifest line {line!r}")
    if digest != hashlib.sha256(blob).hexdigest():
        raise CheckpointError("blob checksum mismatch")
    return arrays, meta


def manifest_hash(directory) -> str:
    return hashlib.sha256((Path(directory) / MANIFEST).read_bytes()).hexdigest()
