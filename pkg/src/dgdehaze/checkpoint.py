"""Self-describing checkpoint container with a content checksum.

Layout: one JSON header line (sorted keys), then the raw little-endian
C-order bytes of every array concatenated in header order.  The header
records a SHA-256 of the payload, so corruption is detected on load and
two checkpoints holding identical arrays are byte-identical files.
"""

import hashlib
import json

import numpy as np

MAGIC = "dg-checkpoint-v1"


class CheckpointError(RuntimeError):
    pass


def _canonical(arr):
    """C-order little-endian view preserving 0-d shapes."""
    arr = np.asarray(arr)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = arr.copy(order="C")
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def params_checksum(arrays):
    """SHA-256 over (name, dtype, shape, bytes) of every array, sorted by name.

    Stable fingerprint of a parameter set, independent of file layout.
    """
    digest = hashlib.sha256()
    for name in sorted(arrays):
        arr = _canonical(arrays[name])
        digest.update(name.encode())
        digest.update(str(arr.dtype).encode())
        digest.update(str(arr.shape).encode())
        digest.update(arr.tobytes())
    return digest.hexdigest()


def save_checkpoint(path, arrays, meta=None):
    """Write ``{name: ndarray}`` plus a JSON-serializable ``meta`` dict."""
    entries = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = _canonical(arrays[name])
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "dtype": str(arr.dtype),
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format": MAGIC,
        "meta": meta or {},
        "arrays": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "params_sha256": params_checksum(arrays),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode())
        fh.write(b"\n")
        fh.write(payload)
    return path


def load_checkpoint(path):
    """Read a checkpoint, verify its checksum, return ``(arrays, meta)``."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: malformed checkpoint header") from exc
    if header.get("format") != MAGIC:
        raise CheckpointError(f"{path}: not a {MAGIC} file")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch (corrupt file)")
    arrays = {}
    for entry in header["arrays"]:
        start, n = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start:start + n], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    if params_checksum(arrays) != header["params_sha256"]:
        raise CheckpointError(f"{path}: parameter checksum mismatch")
    return arrays, header["meta"]


def state_dict_to_arrays(state_dict):
    """Torch ``state_dict`` -> ``{name: ndarray}`` (detached CPU copies)."""
    return {k: v.detach().cpu().numpy().copy() for k, v in state_dict.items()}


def arrays_to_state_dict(arrays):
    import torch

    return {k: torch.from_numpy(v.copy()) for k, v in arrays.items()}


def module_checksum(module):
    """Checksum of a torch module's current parameters and buffers."""
    return params_checksum(state_dict_to_arrays(module.state_dict()))
