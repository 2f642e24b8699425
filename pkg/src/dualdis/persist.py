"""Bit-exact checkpoint serialization (``.ddck``).

File layout:

    bytes 0..7    magic + format version, ``DDCKPT01``
    bytes 8..15   little-endian uint64: manifest length in bytes
    manifest      canonical JSON (sorted keys, no whitespace)
    blob          concatenated row-major little-endian float32 tensors

The manifest lists every tensor with its shape and byte offset into the
blob, carries the model configuration and preset, optimizer bookkeeping,
stream counters, and any extra payload (attribute names, calibrated edit
magnitudes). Integer scalars (batch-norm counters, Adam step counts) live
in the manifest, keeping the blob homogeneous float32.

``load(save(state))`` is bitwise-identical state, and saving a loaded
checkpoint reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .model import DualDisModel, ModelConfig, build_model

MAGIC = b"DDCKPT01"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    def __init__(self, found: str, supported: str):
        super().__init__(f"checkpoint format {found!r} not supported (this build reads {supported!r})")
        self.found = found
        self.supported = supported


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().numpy()).astype("<f4", copy=False).tobytes()


def _param_names(model: DualDisModel) -> dict[int, str]:
    return {id(p): name for name, p in model.named_parameters()}


def save_checkpoint(
    path: Path | str,
    model: DualDisModel,
    optimizers: Optional[tuple] = None,
    stream: Optional[dict] = None,
    train_config: Optional[dict] = None,
    extra: Optional[dict] = None,
):
    """Atomic single-file save (temp file + rename)."""
    path = Path(path)
    tensors = []
    int_scalars = {}
    blob_parts = []
    offset = 0

    def add_tensor(name: str, t: torch.Tensor):
        nonlocal offset
        data = _tensor_bytes(t.float())
        tensors.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(data)})
        blob_parts.append(data)
        offset += len(data)

    for key, value in model.state_dict().items():
        if value.dtype in (torch.int64, torch.int32):
            int_scalars[f"model/{key}"] = int(value.item())
        else:
            add_tensor(f"model/{key}", value)

    opt_manifest = {}
    if optimizers is not None:
        names = _param_names(model)
        for opt_name, opt in zip(("main", "disc"), optimizers):
            entries = []
            for group in opt.param_groups:
                for p in group["params"]:
                    pname = names[id(p)]
                    entries.append(pname)
                    state = opt.state.get(p, {})
                    if state:
                        int_scalars[f"opt/{opt_name}/{pname}/step"] = int(state["step"].item() if torch.is_tensor(state["step"]) else state["step"])
                        add_tensor(f"opt/{opt_name}/{pname}/exp_avg", state["exp_avg"])
                        add_tensor(f"opt/{opt_name}/{pname}/exp_avg_sq", state["exp_avg_sq"])
            opt_manifest[opt_name] = {"params": entries}

    manifest = {
        "format_version": FORMAT_VERSION,
        "endianness": "little",
        "preset": model.preset.name,
        "model_config": model.base_config.to_dict(),
        "tensors": tensors,
        "int_scalars": int_scalars,
        "optimizers": opt_manifest,
        "stream": stream or {},
        "train_config": train_config or {},
        "extra": extra or {},
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".ddck.tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<Q", len(header)))
            f.write(header)
            for part in blob_parts:
                f.write(part)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class LoadedCheckpoint:
    model: DualDisModel
    preset: str
    config: ModelConfig
    manifest: dict
    stream: dict
    train_config: dict
    extra: dict
    _blob: bytes = b""

    def tensor(self, name: str) -> torch.Tensor:
        for entry in self.manifest["tensors"]:
            if entry["name"] == name:
                arr = np.frombuffer(
                    self._blob, dtype="<f4", count=entry["nbytes"] // 4, offset=entry["offset"]
                ).reshape(entry["shape"])
                return torch.from_numpy(arr.copy())
        raise CorruptCheckpointError(f"tensor {name!r} not present in checkpoint")


def load_checkpoint(path: Path | str, inference_only: bool = False) -> LoadedCheckpoint:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16:
        raise CorruptCheckpointError(f"{path}: file too short ({len(raw)} bytes)")
    if raw[:6] != MAGIC[:6]:
        raise CorruptCheckpointError(f"{path}: bad magic {raw[:8]!r}")
    if raw[:8] != MAGIC:
        raise VersionMismatchError(raw[:8].decode("ascii", "replace"), MAGIC.decode())
    (header_len,) = struct.unpack("<Q", raw[8:16])
    if 16 + header_len > len(raw):
        raise CorruptCheckpointError(f"{path}: truncated manifest (declares {header_len} bytes)")
    try:
        manifest = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CorruptCheckpointError(f"{path}: unreadable manifest") from err
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(str(manifest.get("format_version")), str(FORMAT_VERSION))
    blob = raw[16 + header_len :]
    expected = sum(t["nbytes"] for t in manifest["tensors"])
    if len(blob) != expected:
        raise CorruptCheckpointError(f"{path}: blob is {len(blob)} bytes, manifest declares {expected}")

    config = ModelConfig.from_dict(manifest["model_config"])
    model = build_model(config, manifest["preset"])
    loaded = LoadedCheckpoint(
        model=model,
        preset=manifest["preset"],
        config=config,
        manifest=manifest,
        stream=dict(manifest["stream"]),
        train_config=dict(manifest["train_config"]),
        extra=dict(manifest["extra"]),
        _blob=blob,
    )
    state = {}
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name.startswith("model/"):
            state[name[len("model/") :]] = loaded.tensor(name)
    for name, value in manifest["int_scalars"].items():
        if name.startswith("model/"):
            key = name[len("model/") :]
            state[key] = torch.tensor(value, dtype=torch.int64)
    model.load_state_dict(state, strict=True)
    if inference_only:
        model.eval()
        model.requires_grad_(False)
    return loaded


def restore_optimizers(loaded: LoadedCheckpoint, opt_main, opt_disc):
    """Fill freshly constructed optimizers with the checkpointed state.

    The optimizers must have been built from the loaded model with the same
    parameter ordering (``make_optimizers`` guarantees this).
    """
    names = _param_names(loaded.model)
    ints = loaded.manifest["int_scalars"]
    for opt_name, opt in (("main", opt_main), ("disc", opt_disc)):
        saved = loaded.manifest["optimizers"].get(opt_name)
        if saved is None:
            continue
        live = [p for group in opt.param_groups for p in group["params"]]
        if [names[id(p)] for p in live] != saved["params"]:
            raise CheckpointError(f"optimizer {opt_name!r} parameter ordering mismatch")
        state: dict = {}
        for i, p in enumerate(live):
            pname = saved["params"][i]
            step_key = f"opt/{opt_name}/{pname}/step"
            if step_key not in ints:
                continue
            state[i] = {
                "step": torch.tensor(float(ints[step_key])),
                "exp_avg": loaded.tensor(f"opt/{opt_name}/{pname}/exp_avg"),
                "exp_avg_sq": loaded.tensor(f"opt/{opt_name}/{pname}/exp_avg_sq"),
            }
        flat = []
        counter = 0
        for g in opt.param_groups:
            idxs = list(range(counter, counter + len(g["params"])))
            counter += len(g["params"])
            flat.append({**{k: v for k, v in g.items() if k != "params"}, "params": idxs})
        if flat:
            opt.load_state_dict({"state": state, "param_groups": flat})
