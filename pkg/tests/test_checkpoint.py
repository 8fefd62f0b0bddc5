import json
import zipfile

import numpy as np
import pytest
import torch
from conftest import SMALL, TINY

from vfi_augment.checkpoint import CheckpointError, OptimizerState, load_checkpoint, save_checkpoint
from vfi_augment.flownet import build_model


def test_round_trip_is_bit_exact(tmp_path):
    model = build_model(SMALL, seed=4, zero_output=False)
    state = OptimizerState(step=12, skipped=1)
    for name, p in model.named_parameters():
        state.m[name] = torch.randn_like(p)
        state.v[name] = torch.rand_like(p)
    save_checkpoint(tmp_path / "a.npz", model, epoch=3, seed=9, optimizer=state, extra={"note": "x"})
    ckpt = load_checkpoint(tmp_path / "a.npz")
    assert (ckpt.epoch, ckpt.seed, ckpt.extra) == (3, 9, {"note": "x"})
    assert ckpt.model.config == SMALL
    assert (ckpt.optimizer.step, ckpt.optimizer.skipped) == (12, 1)
    for (name, p), (_, q) in zip(model.named_parameters(), ckpt.model.named_parameters()):
        assert torch.equal(p, q)
        assert torch.equal(state.m[name], ckpt.optimizer.m[name])
    save_checkpoint(tmp_path / "b.npz", ckpt.model, epoch=3, seed=9, optimizer=ckpt.optimizer, extra={"note": "x"})
    with np.load(tmp_path / "a.npz") as a, np.load(tmp_path / "b.npz") as b:
        assert sorted(a.files) == sorted(b.files)
        for key in a.files:
            assert a[key].tobytes() == b[key].tobytes()


def test_layout(tmp_path):
    save_checkpoint(tmp_path / "c.npz", build_model(TINY))
    with np.load(tmp_path / "c.npz") as archive:
        meta = json.loads(archive["__meta__"].tobytes())
        assert meta["format"] == "vfi-augment-checkpoint" and meta["version"] == 1
        assert meta["optimizer"] is None
        params = [k for k in archive.files if k.startswith("param/")]
        assert params and all(archive[k].dtype == np.dtype("<f4") for k in params)
        assert "param/base.flow_head.weight" in archive.files


def test_float64_load(tmp_path):
    save_checkpoint(tmp_path / "c.npz", build_model(TINY, zero_output=False))
    model = load_checkpoint(tmp_path / "c.npz", dtype=torch.float64).model
    assert next(model.parameters()).dtype == torch.float64


def test_bad_files(tmp_path):
    (tmp_path / "junk.npz").write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.npz")
    np.savez(tmp_path / "nometa.npz", x=np.zeros(2))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nometa.npz")
    meta = np.frombuffer(json.dumps({"format": "vfi-augment-checkpoint", "version": 99}).encode(), dtype=np.uint8)
    np.savez(tmp_path / "future.npz", __meta__=meta)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "future.npz")
    save_checkpoint(tmp_path / "ok.npz", build_model(TINY))
    with zipfile.ZipFile(tmp_path / "ok.npz") as src, zipfile.ZipFile(tmp_path / "partial.npz", "w") as dst:
        for item in src.infolist():
            if item.filename != "param/base.flow_head.weight.npy":
                dst.writestr(item, src.read(item))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "partial.npz")
