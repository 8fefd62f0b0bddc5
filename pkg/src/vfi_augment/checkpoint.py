"""Versioned checkpoint container.

A checkpoint is a numpy ``.npz`` archive (a zip of ``.npy`` members):

``__meta__``
    uint8 array holding UTF-8 JSON: ``{"format": "vfi-augment-checkpoint",
    "version": 1, "net_config": {...}, "epoch": int, "seed": int,
    "optimizer": {"step": int, "skipped": int} | null, "extra": {...}}``
``param/<name>``
    every model parameter, little-endian float32, keyed by its dotted module
    path (block, group, layer, role), e.g. ``base.groups.0.first.dw.weight``
``opt_m/<name>``, ``opt_v/<name>``
    optional AdamW moment estimates, same dtype and keys

Loading and re-saving is bit-exact.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .flownet import FlowNet, NetConfig

FORMAT_NAME = "vfi-augment-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class OptimizerState:
    step: int = 0
    skipped: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@dataclass
class Checkpoint:
    model: FlowNet
    epoch: int = 0
    seed: int = 0
    optimizer: Optional[OptimizerState] = None
    extra: dict = field(default_factory=dict)


def _le32(tensor: torch.Tensor) -> np.ndarray:
    return tensor.detach().cpu().numpy().astype("<f4")


def save_checkpoint(
    path: str | os.PathLike,
    model: FlowNet,
    *,
    epoch: int = 0,
    seed: int = 0,
    optimizer: Optional[OptimizerState] = None,
    extra: Optional[dict] = None,
) -> None:
    meta = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "net_config": model.config.to_dict(),
        "epoch": int(epoch),
        "seed": int(seed),
        "optimizer": None if optimizer is None else {"step": optimizer.step, "skipped": optimizer.skipped},
        "extra": extra or {},
    }
    arrays = {"__meta__": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for name, param in model.named_parameters():
        arrays[f"param/{name}"] = _le32(param)
    if optimizer is not None:
        for name, value in optimizer.m.items():
            arrays[f"opt_m/{name}"] = _le32(value)
        for name, value in optimizer.v.items():
            arrays[f"opt_v/{name}"] = _le32(value)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | os.PathLike, dtype: torch.dtype = torch.float32) -> Checkpoint:
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    with archive:
        if "__meta__" not in archive.files:
            raise CheckpointError(f"{path}: missing metadata")
        meta = json.loads(archive["__meta__"].tobytes().decode())
        if meta.get("format") != FORMAT_NAME:
            raise CheckpointError(f"{path}: not a {FORMAT_NAME} file")
        if meta.get("version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {meta.get('version')}")
        config = NetConfig.from_dict(meta["net_config"])
        model = FlowNet(config).to(dtype)
        params = dict(model.named_parameters())
        missing = [n for n in params if f"param/{n}" not in archive.files]
        if missing:
            raise CheckpointError(f"{path}: missing parameters {missing[:3]}")
        with torch.no_grad():
            for name, param in params.items():
                value = torch.from_numpy(archive[f"param/{name}"].astype(np.float32))
                if value.shape != param.shape:
                    raise CheckpointError(f"{path}: {name} has shape {tuple(value.shape)}, expected {tuple(param.shape)}")
                param.copy_(value)
        optimizer = None
        if meta.get("optimizer") is not None:
            optimizer = OptimizerState(step=meta["optimizer"]["step"], skipped=meta["optimizer"]["skipped"])
            for name in params:
                if f"opt_m/{name}" in archive.files:
                    optimizer.m[name] = torch.from_numpy(archive[f"opt_m/{name}"].astype(np.float32)).to(dtype)
                    optimizer.v[name] = torch.from_numpy(archive[f"opt_v/{name}"].astype(np.float32)).to(dtype)
    return Checkpoint(model, meta["epoch"], meta["seed"], optimizer, meta.get("extra", {}))
