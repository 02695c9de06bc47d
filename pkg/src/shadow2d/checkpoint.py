"""Binary checkpoint container: JSON manifest + raw little-endian payload.

Layout: 8-byte magic, u64 little-endian manifest length, manifest JSON
(UTF-8), then the tensor payload as concatenated little-endian IEEE-754
arrays. The manifest records name/shape/dtype/offset per tensor and a
SHA-256 of the payload, so corruption and shape or dtype drift are caught
at load time. Round trips are byte-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"SHDW2DCK"

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(
    path: str,
    arrays: dict[str, np.ndarray],
    config: dict,
    iteration: int,
    mode: str,
    rng_state: dict | None = None,
):
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype == np.float32:
            dt = "<f4"
        elif arr.dtype == np.float64:
            dt = "<f8"
        else:
            raise CheckpointError(f"tensor '{name}' has unsupported dtype {arr.dtype}")
        raw = arr.astype(_DTYPES[dt], copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": dt,
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "version": 1,
        "iteration": int(iteration),
        "mode": mode,
        "config": config,
        "rng_state": rng_state or {},
        "tensors": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(payload)


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Returns (manifest, name -> array). Verifies magic, hash and layout."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != MAGIC:
        raise CheckpointError(f"'{path}' is not a checkpoint (bad magic)")
    (mlen,) = struct.unpack("<Q", data[8:16])
    try:
        manifest = json.loads(data[16 : 16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt manifest: {e}") from e
    payload = data[16 + mlen :]
    if hashlib.sha256(payload).hexdigest() != manifest.get("payload_sha256"):
        raise CheckpointError("payload hash mismatch (corrupt checkpoint)")
    arrays = {}
    for e in manifest["tensors"]:
        if e["dtype"] not in _DTYPES:
            raise CheckpointError(f"tensor '{e['name']}': unsupported dtype {e['dtype']}")
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"tensor '{e['name']}': payload truncated")
        arr = np.frombuffer(payload[e["offset"] : end], dtype=_DTYPES[e["dtype"]])
        expected = int(np.prod(e["shape"])) if e["shape"] else 1
        if arr.size != expected:
            raise CheckpointError(
                f"tensor '{e['name']}': length {arr.size} does not match shape {e['shape']}"
            )
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    return manifest, arrays


def load_params_into(params, arrays: dict[str, np.ndarray]):
    """Assign checkpoint arrays into a named Tensor dict, validating layout."""
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise CheckpointError(
            f"parameter names do not match checkpoint "
            f"(missing={sorted(missing)[:3]}, extra={sorted(extra)[:3]})"
        )
    for name, p in params.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(p.shape):
            raise CheckpointError(
                f"tensor '{name}': shape {arr.shape} != expected {tuple(p.shape)}"
            )
        if arr.dtype != p.data.dtype:
            raise CheckpointError(
                f"tensor '{name}': dtype {arr.dtype} != expected {p.data.dtype}"
            )
        p.data = arr.copy()
