"""FCFD-CKPT-1 checkpoint container.

Layout::

    b"FCFD-CKPT-1"                      11-byte version tag
    uint32 little-endian                manifest length in bytes
    manifest                            UTF-8 JSON
    blobs                               little-endian float32, concatenated

The manifest lists every model (id, N, shapes, parameter names), optional
metadata, and one entry per tensor with its name, shape, original dtype and
float offset into the blob area.  Tensor names are namespaced:
``<model>/<state_dict name>``, ``bridges/<state_dict name>`` and
``normstats/<model>.<layer>/<path key>:<running_mean|running_var>``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .bridges import BridgeSet
from .pathing import NormStats, PathKey, RoutedBatchNorm2d
from .staged import StagedModel

MAGIC = b"FCFD-CKPT-1"


class CheckpointError(ValueError):
    pass


def _model_manifest(model: StagedModel) -> dict:
    return {
        "id": model.id,
        "role": model.role,
        "num_stages": model.num_stages,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "stage_output_shapes": [list(s) for s in model.stage_output_shapes],
        "parameter_names": [n for n, _ in model.named_parameters()],
    }


def save_checkpoint(path, models: dict[str, StagedModel], bridges: BridgeSet | None = None,
                    meta: dict | None = None) -> None:
    tensors: list[tuple[str, torch.Tensor, dict]] = []
    for prefix, model in models.items():
        for name, t in model.state_dict().items():
            tensors.append((f"{prefix}/{name}", t, {}))
        for layer, m in model.named_modules():
            if not isinstance(m, RoutedBatchNorm2d):
                continue
            for key, st in m.stats.items():
                base = f"normstats/{prefix}.{layer}/{key}"
                extra = {"layer": f"{prefix}.{layer}", "key": str(key), "update_count": st.update_count}
                tensors.append((base + ":running_mean", st.running_mean, extra))
                tensors.append((base + ":running_var", st.running_var, extra))
    if bridges is not None:
        for name, t in bridges.state_dict().items():
            tensors.append((f"bridges/{name}", t, {}))

    entries, blobs, offset = [], [], 0
    for name, t, extra in tensors:
        arr = t.detach().cpu().numpy().astype("<f4").ravel()
        entries.append({"name": name, "shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", ""),
                        "offset": offset, **extra})
        blobs.append(arr.tobytes())
        offset += arr.size
    manifest = {
        "format": MAGIC.decode(),
        "models": {k: _model_manifest(m) for k, m in models.items()},
        "bridges": None if bridges is None else [
            {"direction": b.direction, "position": b.position, "kind": b.kind,
             "in_shape": list(b.in_shape), "out_shape": list(b.out_shape)} for b in bridges.bridges.values()],
        "meta": meta or {},
        "tensors": entries,
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<I", len(head)) + head)
        for b in blobs:
            f.write(b)


class Checkpoint:
    def __init__(self, manifest: dict, blob: np.ndarray):
        self.manifest = manifest
        self._blob = blob

    @property
    def meta(self) -> dict:
        return self.manifest["meta"]

    def tensor(self, entry: dict) -> torch.Tensor:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = self._blob[entry["offset"]:entry["offset"] + n].astype(np.float32).reshape(entry["shape"])
        return torch.from_numpy(arr.copy()).to(getattr(torch, entry["dtype"]))

    def entries(self, prefix: str) -> list[dict]:
        return [e for e in self.manifest["tensors"] if e["name"].startswith(prefix)]

    def load_model(self, model: StagedModel, prefix: str) -> StagedModel:
        info = self.manifest["models"].get(prefix)
        if info is None:
            raise CheckpointError(f"checkpoint has no model {prefix!r} (has {sorted(self.manifest['models'])})")
        shapes = [list(s) for s in model.stage_output_shapes]
        if info["num_stages"] != model.num_stages or info["stage_output_shapes"] != shapes:
            raise CheckpointError(f"{prefix}: checkpoint shapes {info['stage_output_shapes']} "
                                  f"do not match model shapes {shapes}")
        state = {e["name"][len(prefix) + 1:]: self.tensor(e) for e in self.entries(prefix + "/")}
        model.load_state_dict(state)
        norms = {f"{prefix}.{name}": m for name, m in model.named_modules() if isinstance(m, RoutedBatchNorm2d)}
        for m in norms.values():
            m.reset_stats()
        for e in self.entries("normstats/"):
            if e["layer"] not in norms:
                continue
            m = norms[e["layer"]]
            key = PathKey.parse(e["key"])
            st = m.stats.get(key)
            if st is None:
                st = m.stats[key] = NormStats(torch.zeros(m.num_features), torch.ones(m.num_features),
                                              e["update_count"])
            value = self.tensor(e).to(m.weight.dtype)
            if e["name"].endswith(":running_mean"):
                st.running_mean = value
            else:
                st.running_var = value
        return model

    def load_bridges(self, bridges: BridgeSet) -> BridgeSet:
        state = {e["name"][len("bridges/"):]: self.tensor(e) for e in self.entries("bridges/")}
        bridges.load_state_dict(state)
        return bridges


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not an {MAGIC.decode()} file")
    start = len(MAGIC) + 4
    if len(raw) < start:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<I", raw[len(MAGIC):start])
    try:
        manifest = json.loads(raw[start:start + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt manifest ({e})") from None
    body = len(raw) - start - n
    need = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in manifest.get("tensors", []))
    if body != 4 * need:
        raise CheckpointError(f"{path}: blob area has {body} bytes, manifest needs {4 * need}")
    blob = np.frombuffer(raw, dtype="<f4", offset=start + n)
    return Checkpoint(manifest, blob)
