"""Coarse-to-fine flow estimation network.

Three blocks run on an image pyramid: a base block at 1/4 resolution and two
refinement blocks at 1/2 and full resolution. Each block applies one hourglass
module twice with shared weights, once on ``(I0, I1, ...)`` and once on the
mirrored input ``(I1, I0, ...)``, and averages the two predictions. The
averaging makes the whole network exactly symmetric under swapping the inputs
and replacing ``t`` with ``1 - t``.

Default channel widths (chosen to land near a 5.09M parameter budget):

    ============  =====  =====  =========================  ===========
    block         stem   width  groups 2-3                 parameters
    ============  =====  =====  =========================  ===========
    base (1/4)    96     186    inverted bottleneck k7/k5  2,290,815
    refine (1/2)  64     128    3x3 conv                   1,397,253
    refine (1)    64     128    3x3 conv                   1,397,253
    total                                                  5,085,321
    ============  =====  =====  =========================  ===========
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .imaging import Frame, pad_to_multiple
from .warp import backward_warp, merge, upsample_2x, upsample_flow_2x

PAD_MULTIPLE = 32
# two pyramid halvings, then two stride-2 stem convs inside each module
SIZE_DIVISOR = 16
BASE_IN_CHANNELS = 7  # I0, I1, time plane
REFINE_IN_CHANNELS = 11  # I0, I1, two flows, mask

_ACTIVATIONS = {"silu": nn.SiLU, "gelu": nn.GELU, "softplus": nn.Softplus}


@dataclass(frozen=True)
class NetConfig:
    stem_channels: tuple[int, int, int] = (96, 64, 64)
    group_channels: tuple[int, int, int] = (186, 128, 128)
    expansion_rate: int = 2
    base_kernel_sizes: tuple[tuple[int, int], tuple[int, int]] = ((7, 7), (5, 5))
    scales: tuple[float, float, float] = (0.25, 0.5, 1.0)
    mask_activation: str = "sigmoid"
    activation: str = "silu"
    deconv_kernel: int = 4

    def __post_init__(self):
        object.__setattr__(self, "stem_channels", tuple(int(c) for c in self.stem_channels))
        object.__setattr__(self, "group_channels", tuple(int(c) for c in self.group_channels))
        object.__setattr__(
            self, "base_kernel_sizes", tuple(tuple(int(k) for k in ks) for ks in self.base_kernel_sizes)
        )
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        if len(self.stem_channels) != 3 or len(self.group_channels) != 3:
            raise ValueError("need channel widths for exactly 1 base and 2 refinement blocks")
        if min(self.stem_channels + self.group_channels) < 1:
            raise ValueError("channel widths must be positive")
        if self.expansion_rate != 2:
            raise ValueError("expansion_rate is fixed at 2")
        if self.scales != (0.25, 0.5, 1.0):
            raise ValueError("scales are fixed at (1/4, 1/2, 1)")
        if self.mask_activation != "sigmoid":
            raise ValueError("mask_activation is fixed at 'sigmoid'")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


# ~4.7k parameters, for gradient checks
TINY_CONFIG = NetConfig(stem_channels=(3, 3, 3), group_channels=(3, 3, 3))
# small enough for CPU training runs on synthetic data
DESK_CONFIG = NetConfig(stem_channels=(16, 16, 16), group_channels=(32, 24, 24))


class BlockOutput(NamedTuple):
    flow_t0: torch.Tensor  # N x 2 x H x W
    flow_t1: torch.Tensor
    mask: torch.Tensor  # N x 1 x H x W, in [0, 1]


class NetOutput(NamedTuple):
    frame: torch.Tensor
    flow_t0: torch.Tensor
    flow_t1: torch.Tensor
    mask: torch.Tensor
    blocks: tuple[BlockOutput, ...]


class InvertedBottleneck(nn.Module):
    """Depthwise k x k conv, pointwise expansion by 2, pointwise projection."""

    def __init__(self, channels, kernel_size, expansion, act):
        super().__init__()
        kh, kw = kernel_size
        self.dw = nn.Conv2d(channels, channels, kernel_size, padding=(kh // 2, kw // 2), groups=channels)
        self.expand = nn.Conv2d(channels, channels * expansion, 1)
        self.act = act()
        self.project = nn.Conv2d(channels * expansion, channels, 1)

    def forward(self, x):
        return self.project(self.act(self.expand(self.dw(x))))


class ConvLayer(nn.Sequential):
    def __init__(self, channels, act):
        super().__init__(nn.Conv2d(channels, channels, 3, padding=1), act())


class ResidualGroup(nn.Module):
    """Two layers with a skip connection across the group."""

    def __init__(self, first, second):
        super().__init__()
        self.first = first
        self.second = second

    def forward(self, x):
        return x + self.second(self.first(x))


class HourglassModule(nn.Module):
    """One side of a symmetric block pair.

    stem (two stride-2 3x3 convs) -> four residual groups at 1/4 of the input
    resolution -> stride-2 deconvolution back to 1/2 -> flow head and mask head
    deconvolutions to full resolution. The mask head also sees the predicted
    flows.
    """

    def __init__(self, in_channels, stem, width, config: NetConfig, bottleneck: bool):
        super().__init__()
        act = _ACTIVATIONS[config.activation]
        k = config.deconv_kernel
        pad = (k - 2) // 2
        self.stem1 = nn.Sequential(nn.Conv2d(in_channels, stem, 3, stride=2, padding=1), act())
        self.stem2 = nn.Sequential(nn.Conv2d(stem, width, 3, stride=2, padding=1), act())
        if bottleneck:
            g2, g3 = (
                ResidualGroup(
                    InvertedBottleneck(width, ks, config.expansion_rate, act),
                    InvertedBottleneck(width, ks, config.expansion_rate, act),
                )
                for ks in config.base_kernel_sizes
            )
        else:
            g2, g3 = (
                ResidualGroup(ConvLayer(width, act), nn.Conv2d(width, width, 3, padding=1)) for _ in range(2)
            )
        g4, g5 = (ResidualGroup(ConvLayer(width, act), nn.Conv2d(width, width, 3, padding=1)) for _ in range(2))
        self.groups = nn.Sequential(g2, g3, g4, g5)
        self.up = nn.ConvTranspose2d(width, stem, k, stride=2, padding=pad)
        self.act = act()
        self.flow_head = nn.ConvTranspose2d(stem, 4, k, stride=2, padding=pad)
        self.mask_head = nn.ConvTranspose2d(stem + 4, 1, k, stride=2, padding=pad)

    def forward(self, x):
        s1 = self.stem1(x)
        feat = self.groups(self.stem2(s1))
        feat = self.act(self.up(feat)) + s1
        flows = self.flow_head(feat)
        flows_half = F.avg_pool2d(flows, 2)
        mask_logit = self.mask_head(torch.cat([feat, flows_half], 1))
        return flows, mask_logit

    def output_layers(self):
        return (self.flow_head, self.mask_head)


def _pair_forward(module: HourglassModule, left: torch.Tensor, right: torch.Tensor):
    n = left.shape[0]
    flows, logits = module(torch.cat([left, right], 0))
    mask = torch.sigmoid(logits)
    return (flows[:n], mask[:n]), (flows[n:], mask[n:])


def _combine(left, right):
    (lf, lm), (rf, rm) = left, right
    flow_t0 = 0.5 * (lf[:, 0:2] + rf[:, 2:4])
    flow_t1 = 0.5 * (lf[:, 2:4] + rf[:, 0:2])
    mask = 0.5 * (lm + (1 - rm))
    return flow_t0, flow_t1, mask


def _time_plane(t, like: torch.Tensor) -> torch.Tensor:
    n, _, h, w = like.shape
    t = torch.as_tensor(t, dtype=like.dtype, device=like.device)
    if not torch.all(torch.isfinite(t)):
        raise ValueError("time step must be finite")
    return t.reshape(-1, 1, 1, 1).expand(n, 1, h, w)


class FlowNet(nn.Module):
    """Base block plus two refinement blocks; holds the learned weights."""

    version = 1

    def __init__(self, config: Optional[NetConfig] = None):
        super().__init__()
        self.config = config or NetConfig()
        c = self.config
        self.base = HourglassModule(BASE_IN_CHANNELS, c.stem_channels[0], c.group_channels[0], c, bottleneck=True)
        self.refine = nn.ModuleList(
            HourglassModule(REFINE_IN_CHANNELS, c.stem_channels[i], c.group_channels[i], c, bottleneck=False)
            for i in (1, 2)
        )

    def base_block_forward(self, img0: torch.Tensor, img1: torch.Tensor, t) -> BlockOutput:
        if img0.shape != img1.shape:
            raise ValueError("base block inputs must share a shape")
        if not (torch.isfinite(img0).all() and torch.isfinite(img1).all()):
            raise ValueError("non-finite input images")
        plane = _time_plane(t, img0)
        left = torch.cat([img0, img1, plane], 1)
        right = torch.cat([img1, img0, 1 - plane], 1)
        return BlockOutput(*_combine(*_pair_forward(self.base, left, right)))

    def refinement_block_forward(
        self, index: int, img0: torch.Tensor, img1: torch.Tensor, prior: BlockOutput
    ) -> BlockOutput:
        """Refine an already-upsampled prior with residual flows and a fresh mask."""
        if prior.flow_t0.shape[-2:] != img0.shape[-2:]:
            raise ValueError(
                f"prior at {tuple(prior.flow_t0.shape[-2:])} does not match images at {tuple(img0.shape[-2:])}"
            )
        left = torch.cat([img0, img1, prior.flow_t0, prior.flow_t1, prior.mask], 1)
        right = torch.cat([img1, img0, prior.flow_t1, prior.flow_t0, 1 - prior.mask], 1)
        d_t0, d_t1, mask = _combine(*_pair_forward(self.refine[index], left, right))
        return BlockOutput(prior.flow_t0 + d_t0, prior.flow_t1 + d_t1, mask)

    def forward(self, img0: torch.Tensor, img1: torch.Tensor, t) -> NetOutput:
        """Run the cascade on N x 3 x H x W inputs with H, W divisible by 16."""
        h, w = img0.shape[-2:]
        if img0.shape != img1.shape:
            raise ValueError("input frames must share a shape")
        if h % SIZE_DIVISOR or w % SIZE_DIVISOR:
            raise ValueError(f"input size {h}x{w} must be divisible by {SIZE_DIVISOR}")
        half0, half1 = F.avg_pool2d(img0, 2), F.avg_pool2d(img1, 2)
        quarter0, quarter1 = F.avg_pool2d(half0, 2), F.avg_pool2d(half1, 2)

        out = self.base_block_forward(quarter0, quarter1, t)
        blocks = [out]
        for index, (a, b) in enumerate(((half0, half1), (img0, img1))):
            prior = BlockOutput(upsample_flow_2x(out.flow_t0), upsample_flow_2x(out.flow_t1), upsample_2x(out.mask))
            out = self.refinement_block_forward(index, a, b, prior)
            blocks.append(out)

        frame = merge(backward_warp(img0, out.flow_t0), backward_warp(img1, out.flow_t1), out.mask)
        return NetOutput(frame, out.flow_t0, out.flow_t1, out.mask, tuple(blocks))


def init_weights(model: FlowNet, seed: int = 0, zero_output: bool = True) -> FlowNet:
    """Fan-in scaled normal init from a seeded generator.

    With ``zero_output`` the flow and mask heads start at zero, so the untrained
    network predicts zero flow and a 0.5 mask (a plain linear blend).
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for mod in model.modules():
            if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d)):
                weight = mod.weight
                if isinstance(mod, nn.ConvTranspose2d):
                    # effective fan-in of a stride-2 transposed conv
                    fan_in = weight.shape[0] * weight[0, 0].numel() // 4
                else:
                    fan_in = weight[0].numel()
                std = (2.0 / max(fan_in, 1)) ** 0.5
                weight.copy_(torch.randn(weight.shape, generator=gen, dtype=weight.dtype) * std)
                mod.bias.zero_()
        if zero_output:
            for module in [model.base, *model.refine]:
                for head in module.output_layers():
                    head.weight.zero_()
                    head.bias.zero_()
    return model


def build_model(config: Optional[NetConfig] = None, seed: int = 0, zero_output: bool = True) -> FlowNet:
    return init_weights(FlowNet(config), seed=seed, zero_output=zero_output)


def count_parameters(weights) -> int:
    """Number of scalar parameters, counting shared arrays once.

    Accepts a module, a mapping of name -> array, or an iterable of arrays.
    """
    if isinstance(weights, nn.Module):
        arrays = list(weights.parameters())
    elif isinstance(weights, dict):
        arrays = list(weights.values())
    else:
        arrays = list(weights)
    seen = set()
    total = 0
    for arr in arrays:
        key = id(arr)
        if key in seen:
            continue
        seen.add(key)
        total += int(arr.numel() if isinstance(arr, torch.Tensor) else np.size(arr))
    return total


def _run_padded(model: FlowNet, frame0: Frame, frame1: Frame, t: float):
    if frame0.pixels.shape != frame1.pixels.shape:
        raise ValueError("frames must share dimensions")
    if not np.isfinite(t):
        raise ValueError("t must be finite")
    dtype = next(model.parameters()).dtype
    p0, record = pad_to_multiple(frame0.pixels, PAD_MULTIPLE)
    p1, _ = pad_to_multiple(frame1.pixels, PAD_MULTIPLE)
    x0, x1 = (torch.from_numpy(np.ascontiguousarray(p)).permute(2, 0, 1)[None] for p in (p0, p1))
    with torch.no_grad():
        out = model(x0.to(dtype), x1.to(dtype), torch.tensor([t], dtype=dtype))
    return out, record, (x0, x1)


def interpolate(model: FlowNet, frame0: Frame, frame1: Frame, t: float) -> Frame:
    """Synthesize the frame at time ``t`` between two frames.

    Frames are edge-padded to a multiple of 32, run through the cascade and
    cropped back. Values of ``t`` outside [0, 1] extrapolate. The final warp
    and blend are applied to the float64 source pixels, whatever the model's
    precision.
    """
    out, record, (x0, x1) = _run_padded(model, frame0, frame1, t)
    flow_t0, flow_t1, mask = (x.double() for x in (out.flow_t0, out.flow_t1, out.mask))
    merged = merge(backward_warp(x0, flow_t0), backward_warp(x1, flow_t1), mask)
    pixels = record.crop(merged[0].permute(1, 2, 0).numpy())
    return Frame(np.clip(pixels, 0.0, 1.0), timestamp=_lerp_timestamp(frame0, frame1, t))


def _lerp_timestamp(frame0: Frame, frame1: Frame, t: float):
    if frame0.timestamp is None or frame1.timestamp is None:
        return None
    return frame0.timestamp + t * (frame1.timestamp - frame0.timestamp)


def flows_for(model: FlowNet, frame0: Frame, frame1: Frame, t: float) -> BlockOutput:
    """Final-scale flows and mask for a frame pair, cropped to the frame size."""
    out, record, _ = _run_padded(model, frame0, frame1, t)
    return BlockOutput(*(record.crop(x) for x in (out.flow_t0, out.flow_t1, out.mask)))
