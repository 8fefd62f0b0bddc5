"""Backward warping, mask blending and flow resampling.

Tensors use the batch layout N x C x H x W; flows are N x 2 x H x W with
channel 0 holding dx (column offset) and channel 1 holding dy (row offset), in
pixels at the flow's own resolution. Functions also accept single H x W x C
numpy arrays and return numpy in that case.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

FLOW_MAGIC = b"PS4F"


def _to_batch(array: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(array, dtype=np.float64)).permute(2, 0, 1)[None]


def _from_batch(tensor: torch.Tensor) -> np.ndarray:
    return tensor[0].permute(1, 2, 0).detach().cpu().numpy()


def backward_warp(image, flow):
    """Sample ``image`` at ``p + flow(p)`` with bilinear weights.

    Sample positions outside the image are clamped to the border, so the result
    is always a convex combination of input pixels.
    """
    if isinstance(image, np.ndarray):
        return _from_batch(backward_warp(_to_batch(image), _to_batch(flow)))

    n, c, h, w = image.shape
    if flow.shape != (n, 2, h, w):
        raise ValueError(f"flow shape {tuple(flow.shape)} does not match image {tuple(image.shape)}")
    flow = flow.to(image.dtype)
    xs = torch.arange(w, dtype=image.dtype, device=image.device).view(1, 1, w)
    ys = torch.arange(h, dtype=image.dtype, device=image.device).view(1, h, 1)
    gx = (xs + flow[:, 0]).clamp(0, w - 1)
    gy = (ys + flow[:, 1]).clamp(0, h - 1)

    x0 = gx.detach().floor()
    y0 = gy.detach().floor()
    wx = gx - x0
    wy = gy - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = image.reshape(n, c, h * w)

    def gather(yi, xi):
        index = (yi * w + xi).view(n, 1, h * w).expand(n, c, h * w)
        return flat.gather(2, index).view(n, c, h, w)

    wx = wx.unsqueeze(1)
    wy = wy.unsqueeze(1)
    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    return top * (1 - wy) + bottom * wy


def merge(warped0, warped1, mask):
    """Blend two warped frames: ``mask * warped0 + (1 - mask) * warped1``."""
    if isinstance(mask, torch.Tensor):
        mask_values = mask.detach()
    else:
        mask_values = np.asarray(mask)
    lo, hi = float(mask_values.min()), float(mask_values.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"mask must lie in [0, 1], got range [{lo}, {hi}]")
    if isinstance(warped0, np.ndarray):
        if warped0.shape[:2] != warped1.shape[:2] or warped0.shape[:2] != mask.shape[:2]:
            raise ValueError("merge inputs must share H x W")
    elif warped0.shape[-2:] != warped1.shape[-2:] or warped0.shape[-2:] != mask.shape[-2:]:
        raise ValueError("merge inputs must share H x W")
    return mask * warped0 + (1 - mask) * warped1


def upsample_flow_2x(flow):
    """Bilinearly upsample a flow to twice the size and double its vectors."""
    if isinstance(flow, np.ndarray):
        return _from_batch(upsample_flow_2x(_to_batch(flow)))
    return 2.0 * F.interpolate(flow, scale_factor=2, mode="bilinear", align_corners=True)


def upsample_2x(field):
    """Bilinear 2x upsampling without rescaling values (masks)."""
    return F.interpolate(field, scale_factor=2, mode="bilinear", align_corners=True)


def write_flow(flow: np.ndarray, path) -> None:
    """Dump an H x W x 2 flow: magic, u32 H, u32 W, then little-endian float32 data."""
    flow = np.asarray(flow)
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC + struct.pack("<II", h, w))
        fh.write(flow.astype("<f4").tobytes())


def read_flow(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FLOW_MAGIC:
        raise ValueError(f"{path} is not a flow dump")
    h, w = struct.unpack("<II", data[4:12])
    values = np.frombuffer(data[12:], dtype="<f4")
    if values.size != h * w * 2:
        raise ValueError(f"{path}: expected {h * w * 2} floats, found {values.size}")
    return values.reshape(h, w, 2).astype(np.float32)
