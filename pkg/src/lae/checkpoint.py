"""Versioned binary checkpoint container.

Layout: magic, little-endian header length, JSON header (version, config
snapshot, trainer state, RNG state, array directory), then the raw array
payload. Serialization is fully deterministic, so save -> load -> save
reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

MAGIC = b"LAECKPT\x01"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _flatten_state(prefix: str, state: dict, out: dict[str, np.ndarray]) -> dict:
    """Replace tensors in a nested dict with payload references.

    Integer dict keys (optimizer state uses them) are tagged so they
    survive the JSON round trip intact.
    """
    ref = {}
    int_keys = any(isinstance(k, int) for k in state)
    for key, val in state.items():
        name = f"{prefix}.{key}"
        if isinstance(val, torch.Tensor):
            out[name] = val.detach().cpu().numpy()
            ref[str(key)] = {"__tensor__": name}
        elif isinstance(val, dict):
            ref[str(key)] = _flatten_state(name, val, out)
        elif isinstance(val, (list, tuple)):
            ref[str(key)] = [
                _flatten_state(f"{name}.{i}", v, out) if isinstance(v, dict)
                else v for i, v in enumerate(val)]
        else:
            ref[str(key)] = val
    if int_keys:
        return {"__intkeys__": ref}
    return ref


def _restore_state(ref, arrays: dict[str, np.ndarray]):
    if isinstance(ref, dict):
        if "__tensor__" in ref:
            return torch.from_numpy(arrays[ref["__tensor__"]].copy())
        if "__intkeys__" in ref:
            return {int(k): _restore_state(v, arrays)
                    for k, v in ref["__intkeys__"].items()}
        return {k: _restore_state(v, arrays) for k, v in ref.items()}
    if isinstance(ref, list):
        return [_restore_state(v, arrays) for v in ref]
    return ref


def save_checkpoint(path: Path | str, *, model_state: dict, config: dict,
                    trainer_state: dict | None = None,
                    optimizer_state: dict | None = None,
                    rng_state: dict | None = None) -> Path:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    model_ref = _flatten_state("model", model_state, arrays)
    opt_ref = (_flatten_state("opt", optimizer_state, arrays)
               if optimizer_state is not None else None)
    rng_ref = None
    if rng_state is not None:
        rng_ref = dict(rng_state)
        if "torch" in rng_ref:
            arrays["rng.torch"] = rng_ref["torch"].numpy()
            rng_ref["torch"] = {"__tensor__": "rng.torch"}

    directory = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        arrays[name] = arr
        directory.append({"name": name, "dtype": arr.dtype.str,
                          "shape": list(arr.shape), "offset": offset,
                          "nbytes": arr.nbytes})
        offset += arr.nbytes

    header = {"version": VERSION, "config": config,
              "trainer_state": trainer_state, "model": model_ref,
              "optimizer": opt_ref, "rng": rng_ref, "arrays": directory}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for entry in directory:
            f.write(arrays[entry["name"]].tobytes())
    return path


def load_checkpoint(path: Path | str) -> dict:
    """Returns a dict with keys: config, trainer_state, model_state,
    optimizer_state, rng_state."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(data) < len(MAGIC) + 8 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        header = json.loads(data[start:start + hlen])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint header in {path}") from e
    if header.get("version") != VERSION:
        raise CheckpointError(
            f"checkpoint version {header.get('version')} unsupported "
            f"(expected {VERSION})")

    payload = start + hlen
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        begin = payload + entry["offset"]
        end = begin + entry["nbytes"]
        if end > len(data):
            raise CheckpointError(f"truncated checkpoint payload in {path}")
        arrays[entry["name"]] = np.frombuffer(
            data[begin:end], dtype=np.dtype(entry["dtype"])
        ).reshape(entry["shape"])

    rng_state = _restore_state(header["rng"], arrays) if header["rng"] else None
    return {
        "config": header["config"],
        "trainer_state": header["trainer_state"],
        "model_state": _restore_state(header["model"], arrays),
        "optimizer_state": (_restore_state(header["optimizer"], arrays)
                            if header["optimizer"] is not None else None),
        "rng_state": rng_state,
    }


def config_fingerprint(config) -> str:
    """Short stable hash of a config dataclass or dict, for report headers."""
    import hashlib
    if not isinstance(config, dict):
        config = asdict(config)
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]
