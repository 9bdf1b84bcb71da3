"""Single-file checkpoint container.

Layout: an 8-byte magic, a u32 little-endian header length, a UTF-8 JSON
header, then one length-prefixed (u64 little-endian) raw blob per tensor in
header order. Tensors are stored little-endian float32; the header records
name, shape, and a sha256 per blob, so truncation or corruption fails the
load before anything is returned.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import sys
from dataclasses import dataclass, field
from typing import Dict

import numpy as np
import torch

MAGIC = b"SPDIFF\x00\x01"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class CheckpointManifest:
    format_version: int = FORMAT_VERSION
    stage: str = "none"              # none | codec | image | video
    step: int = 0
    seed_lineage: list = field(default_factory=list)
    schedule: dict = field(default_factory=dict)
    model_config: dict = field(default_factory=dict)
    latent_scale: float = 1.0
    codec_hash: str = ""
    tensors: Dict[str, torch.Tensor] = field(default_factory=dict)

    def meta(self) -> dict:
        return {
            "format_version": self.format_version,
            "stage": self.stage,
            "step": self.step,
            "seed_lineage": self.seed_lineage,
            "schedule": self.schedule,
            "model_config": self.model_config,
            "latent_scale": self.latent_scale,
            "codec_hash": self.codec_hash,
        }


def pack_modules(modules: Dict[str, torch.nn.Module]) -> Dict[str, torch.Tensor]:
    """Flatten named modules' state dicts into 'module.param' tensors."""
    tensors = {}
    for prefix, module in modules.items():
        for name, tensor in module.state_dict().items():
            tensors[f"{prefix}.{name}"] = tensor.detach().cpu()
    return tensors


def unpack_into(manifest: CheckpointManifest, prefix: str, module: torch.nn.Module) -> None:
    """Strict-load the 'prefix.*' tensors of a manifest into a module."""
    state = {}
    plen = len(prefix) + 1
    for name, tensor in manifest.tensors.items():
        if name.startswith(prefix + "."):
            state[name[plen:]] = tensor
    if not state:
        raise CheckpointError(f"checkpoint has no tensors under {prefix!r}")
    module.load_state_dict(state, strict=True)


def save_checkpoint(manifest: CheckpointManifest, path: str) -> str:
    """Atomically write the container; returns the path."""
    names = sorted(manifest.tensors)
    header = dict(manifest.meta())
    blobs = []
    tensor_meta = []
    for name in names:
        t = manifest.tensors[name].detach().cpu().to(torch.float32)
        raw = t.numpy().astype("<f4", copy=False).tobytes()
        blobs.append(raw)
        tensor_meta.append(
            {
                "name": name,
                "shape": list(t.shape),
                "dtype": "<f4",
                "nbytes": len(raw),
                "sha256": hashlib.sha256(raw).hexdigest(),
            }
        )
    header["tensors"] = tensor_meta
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for raw in blobs:
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str) -> CheckpointManifest:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint container (bad magic)")
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4, path))
        header = json.loads(_read_exact(fh, hlen, path).decode("utf-8"))
        version = header.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint format version {version} "
                f"(supported: {FORMAT_VERSION})"
            )
        tensors: Dict[str, torch.Tensor] = {}
        for meta in header["tensors"]:
            (blen,) = struct.unpack("<Q", _read_exact(fh, 8, path))
            if blen != meta["nbytes"]:
                raise CheckpointError(
                    f"{path}: blob {meta['name']} length {blen} != header {meta['nbytes']}"
                )
            raw = _read_exact(fh, blen, path)
            if hashlib.sha256(raw).hexdigest() != meta["sha256"]:
                raise CheckpointError(f"{path}: checksum mismatch on {meta['name']}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(meta["shape"]).copy()
            tensors[meta["name"]] = torch.from_numpy(arr)
    return CheckpointManifest(
        format_version=version,
        stage=header.get("stage", "none"),
        step=header.get("step", 0),
        seed_lineage=header.get("seed_lineage", []),
        schedule=header.get("schedule", {}),
        model_config=header.get("model_config", {}),
        latent_scale=header.get("latent_scale", 1.0),
        codec_hash=header.get("codec_hash", ""),
        tensors=tensors,
    )


def _read_exact(fh, n: int, path: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"{path}: truncated (wanted {n} bytes, got {len(data)})")
    return data
