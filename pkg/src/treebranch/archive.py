"""Single-file parameter archives with an explicit shape manifest.

Layout: magic bytes, a little-endian uint64 header length, a JSON header
listing (name, dtype, shape) for every tensor plus free-form metadata, then
the raw array buffers in header order. Writing is deterministic: identical
content produces identical bytes, so archives can be compared byte-for-byte.
"""

from __future__ import annotations

import json
import struct

import numpy as np
import torch

from .errors import ArchiveError

_MAGIC = b"TBAR\x01"


def save_archive(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays plus a metadata dict to `path`."""
    entries = []
    buffers = []
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        shape = list(arr.shape)  # recorded first: ascontiguousarray promotes 0-d to 1-d
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        entries.append({"name": name, "dtype": str(arr.dtype), "shape": shape})
        buffers.append(arr.tobytes())
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for buf in buffers:
            fh.write(buf)


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read an archive back as ({name: array}, meta)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ArchiveError(f"{path}: not a parameter archive (bad magic bytes)")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(header_len))
        except ValueError as exc:
            raise ArchiveError(f"{path}: corrupt archive header ({exc})") from exc
        arrays: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            shape = tuple(int(s) for s in entry["shape"])
            dtype = np.dtype(entry["dtype"])
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            buf = fh.read(nbytes)
            if len(buf) != nbytes:
                raise ArchiveError(f"{path}: truncated buffer for tensor '{entry['name']}'")
            arrays[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    return arrays, header["meta"]


def module_state_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    """Snapshot a module's parameters and buffers as numpy arrays."""
    return {name: t.detach().cpu().numpy().copy() for name, t in module.state_dict().items()}


def load_state_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray], context: str = "") -> None:
    """Copy arrays into a module's state, validating every name and shape first.

    All entries are checked before anything is assigned, so a mismatch never
    leaves the module half-loaded.
    """
    state = module.state_dict()
    missing = sorted(set(state) - set(arrays))
    if missing:
        raise ArchiveError(f"{context}archive is missing parameters: {', '.join(missing)}")
    unexpected = sorted(set(arrays) - set(state))
    if unexpected:
        raise ArchiveError(f"{context}archive has unexpected parameters: {', '.join(unexpected)}")
    for name, target in state.items():
        src = arrays[name]
        if tuple(src.shape) != tuple(target.shape):
            raise ArchiveError(
                f"{context}parameter '{name}': archive shape {tuple(src.shape)} "
                f"does not match model shape {tuple(target.shape)}"
            )
    with torch.no_grad():
        for name, target in state.items():
            target.copy_(torch.from_numpy(arrays[name]))
