"""Versioned checkpoint container.

A checkpoint is a zip archive holding one .npy entry per named tensor plus
a manifest.json listing format version, every parameter's name, namespace,
shape and dtype, and the embedded model/run configuration. Entries are
stored uncompressed with fixed timestamps, so the file bytes are a pure
function of the contents and tensors round-trip bit-exactly.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

__all__ = ["FORMAT_VERSION", "CheckpointData", "save_checkpoint", "load_checkpoint"]

FORMAT_VERSION = 1
_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass
class CheckpointData:
    generator_state: dict[str, Tensor]
    discriminator_state: dict[str, Tensor]
    config: dict
    extra: dict


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, payload)


def _npy_bytes(t: Tensor) -> bytes:
    buf = io.BytesIO()
    np.save(buf, t.detach().cpu().numpy())
    return buf.getvalue()


def save_checkpoint(path, generator_state: dict[str, Tensor],
                    discriminator_state: dict[str, Tensor] | None = None,
                    config: dict | None = None, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    namespaces = {"generator": generator_state, "discriminator": discriminator_state or {}}
    params = []
    for ns, state in namespaces.items():
        for name, tensor in state.items():
            params.append({
                "name": name,
                "namespace": ns,
                "shape": list(tensor.shape),
                "dtype": str(tensor.dtype).removeprefix("torch."),
            })
    manifest = {
        "version": FORMAT_VERSION,
        "params": params,
        "config": config or {},
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode())
        for ns, state in namespaces.items():
            for name, tensor in state.items():
                _write_entry(zf, f"{ns}/{name}.npy", _npy_bytes(tensor))


def load_checkpoint(path) -> CheckpointData:
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest["version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest['version']}")
        states: dict[str, dict[str, Tensor]] = {"generator": {}, "discriminator": {}}
        for entry in manifest["params"]:
            ns, name = entry["namespace"], entry["name"]
            arr = np.load(io.BytesIO(zf.read(f"{ns}/{name}.npy")))
            tensor = torch.from_numpy(arr)
            if list(tensor.shape) != entry["shape"]:
                raise ValueError(f"{ns}/{name}: stored shape {list(tensor.shape)} "
                                 f"!= manifest shape {entry['shape']}")
            states[ns][name] = tensor
    return CheckpointData(
        generator_state=states["generator"],
        discriminator_state=states["discriminator"],
        config=manifest["config"],
        extra=manifest["extra"],
    )
