"""Training objective: L1 reconstruction + weighted perceptual term + teacher flow distillation."""

from __future__ import annotations

from typing import NamedTuple, Optional, Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


PERCEPTUAL_WEIGHT = 0.005
TEACHER_CUTOFF_EPOCHS = 200
REFERENCE_EPOCHS = 300


def _tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    pixels = getattr(x, "pixels", x)
    return torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float64)).permute(2, 0, 1)[None]


def _check_same(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_loss(predicted, target) -> torch.Tensor:
    predicted, target = _tensor(predicted), _tensor(target)
    _check_same(predicted, target, "l1_loss")
    return (predicted - target).abs().mean()


class GradientPyramid(nn.Module):
    """Fixed, training-free feature stack used as the default perceptual extractor.

    Each level holds a Gaussian-blurred copy of the input plus its horizontal
    and vertical central differences; the next level is a 2x average pool of
    the blurred image.
    """

    def __init__(self, levels: int = 3, sigma: float = 1.0, radius: int = 2):
        super().__init__()
        self.levels = levels
        x = torch.arange(-radius, radius + 1, dtype=torch.float64)
        g = torch.exp(-(x**2) / (2 * sigma**2))
        self.register_buffer("gauss", g / g.sum(), persistent=False)
        self.radius = radius

    def _blur(self, img):
        c = img.shape[1]
        g = self.gauss.to(img.dtype)
        r = self.radius
        img = F.pad(img, (r, r, r, r), mode="replicate")
        img = F.conv2d(img, g.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
        return F.conv2d(img, g.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)

    def forward(self, img: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for level in range(self.levels):
            blurred = self._blur(img)
            padded = F.pad(blurred, (1, 1, 1, 1), mode="replicate")
            gx = 0.5 * (padded[..., 1:-1, 2:] - padded[..., 1:-1, :-2])
            gy = 0.5 * (padded[..., 2:, 1:-1] - padded[..., :-2, 1:-1])
            feats.append(torch.cat([blurred, gx, gy], 1))
            if level + 1 < self.levels:
                if min(blurred.shape[-2:]) < 2:
                    break
                img = F.avg_pool2d(blurred, 2)
        return feats


def perceptual_loss(predicted, target, extractor: Optional[nn.Module] = None) -> torch.Tensor:
    """Mean squared distance between feature maps, averaged over feature levels.

    ``extractor`` maps an N x 3 x H x W batch to a tensor or a list of tensors;
    any pretrained network with that signature can be dropped in.
    """
    predicted, target = _tensor(predicted), _tensor(target)
    _check_same(predicted, target, "perceptual_loss")
    extractor = extractor if extractor is not None else _default_extractor()
    fp, ft = extractor(predicted), extractor(target)
    if isinstance(fp, torch.Tensor):
        fp, ft = [fp], [ft]
    return sum(((a - b) ** 2).mean() for a, b in zip(fp, ft)) / len(fp)


_DEFAULT_EXTRACTOR: Optional[GradientPyramid] = None


def _default_extractor() -> GradientPyramid:
    global _DEFAULT_EXTRACTOR
    if _DEFAULT_EXTRACTOR is None:
        _DEFAULT_EXTRACTOR = GradientPyramid()
    return _DEFAULT_EXTRACTOR


def teacher_loss(predicted_flows: Sequence, teacher_flows: Sequence) -> torch.Tensor:
    """Mean absolute difference over both directional flows and both components."""
    if len(predicted_flows) != 2 or len(teacher_flows) != 2:
        raise ValueError("expected a (flow_t0, flow_t1) pair on each side")
    diffs = []
    for p, q in zip(predicted_flows, teacher_flows):
        p, q = torch.as_tensor(p), torch.as_tensor(q).to(torch.as_tensor(p).dtype)
        _check_same(p, q, "teacher_loss")
        diffs.append((p - q).abs().flatten())
    return torch.cat(diffs).mean()


class TeacherOracle(Protocol):
    def __call__(self, frame0, frame1, frame_t, t) -> tuple[torch.Tensor, torch.Tensor]: ...


class BlockMatchingTeacher:
    """Coarse-to-fine block matching from the ground-truth middle frame to each input.

    Produces backward flows ``F_t->0`` and ``F_t->1`` at the frame resolution.
    Integer search of +-``radius`` pixels at the coarsest pyramid level and
    +-1 pixel at finer levels, then half- and quarter-pixel refinement at full
    resolution. Stateless, so safe for concurrent use.
    """

    def __init__(self, levels: int = 3, radius: int = 2, patch: int = 5):
        self.levels = levels
        self.radius = radius
        self.patch = patch

    def __call__(self, frame0, frame1, frame_t, t=None):
        frame0, frame1, frame_t = _tensor(frame0), _tensor(frame1), _tensor(frame_t)
        n = frame_t.shape[0]
        flows = self.match(torch.cat([frame_t, frame_t]), torch.cat([frame0, frame1]))
        return flows[:n], flows[n:]

    @staticmethod
    def _warp(source, flow):
        # grid_sample is several times faster than the exact gather warp; the
        # teacher only needs approximate sampling
        n, _, h, w = source.shape
        xs = torch.arange(w, dtype=source.dtype).view(1, 1, w) + flow[:, 0]
        ys = torch.arange(h, dtype=source.dtype).view(1, h, 1) + flow[:, 1]
        grid = torch.stack([2 * xs / max(w - 1, 1) - 1, 2 * ys / max(h - 1, 1) - 1], dim=-1)
        return F.grid_sample(source, grid, mode="bilinear", padding_mode="border", align_corners=True)

    def _cost(self, target, source, flow):
        diff = (target - self._warp(source, flow)).abs().sum(1, keepdim=True)
        p = self.patch
        return F.avg_pool2d(diff, p, stride=1, padding=p // 2, count_include_pad=False)

    def _search(self, target, source, flow, offsets):
        best_flow = flow
        best_cost = self._cost(target, source, flow)
        for dx, dy in offsets:
            if dx == 0 and dy == 0:
                continue
            shift = torch.tensor([dx, dy], dtype=flow.dtype).view(1, 2, 1, 1)
            cand = flow + shift
            cost = self._cost(target, source, cand)
            better = cost < best_cost
            best_cost = torch.where(better, cost, best_cost)
            best_flow = torch.where(better, cand, best_flow)
        return best_flow

    @torch.no_grad()
    def match(self, target: torch.Tensor, source: torch.Tensor) -> torch.Tensor:
        """Backward flow such that ``source(p + flow(p)) ~ target(p)``."""
        pyramid = [(target, source)]
        for _ in range(self.levels - 1):
            t, s = pyramid[-1]
            if min(t.shape[-2:]) < 2 * self.patch:
                break
            pyramid.append((F.avg_pool2d(t, 2, ceil_mode=True), F.avg_pool2d(s, 2, ceil_mode=True)))

        def window(r):
            return [(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]

        flow = None
        for t, s in reversed(pyramid):
            n, _, h, w = t.shape
            radius = 1
            if flow is None:
                flow = t.new_zeros(n, 2, h, w)
                radius = self.radius
            else:
                ph, pw = flow.shape[-2:]
                flow = F.interpolate(flow, size=(h, w), mode="bilinear", align_corners=True)
                flow = flow * torch.tensor([w / pw, h / ph], dtype=flow.dtype).view(1, 2, 1, 1)
            flow = self._search(t, s, flow, window(radius))
        for step in (0.5, 0.25):
            sub = [(dx * step, dy * step) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
            flow = self._search(target, source, flow, sub)
        return flow


class LossBreakdown(NamedTuple):
    l1: torch.Tensor
    perceptual: torch.Tensor
    teacher: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(v.detach()) for k, v in self._asdict().items()}


def scaled_teacher_cutoff(total_epochs: int) -> int:
    """Distillation cutoff keeping the 200-of-300 epoch ratio for shorter schedules."""
    return round(TEACHER_CUTOFF_EPOCHS / REFERENCE_EPOCHS * total_epochs)


def total_loss(
    pred,
    target,
    flows=None,
    *,
    teacher: Optional[TeacherOracle] = None,
    frame0=None,
    frame1=None,
    t=None,
    teacher_flows=None,
    epoch: int = 0,
    teacher_cutoff: int = TEACHER_CUTOFF_EPOCHS,
    lam: float = PERCEPTUAL_WEIGHT,
    extractor: Optional[nn.Module] = None,
) -> LossBreakdown:
    """``l1 + lam * perceptual + teacher``.

    The teacher term is active only while ``epoch < teacher_cutoff`` and when
    either a ``teacher`` oracle (queried with ``frame0, frame1, target, t``) or
    precomputed ``teacher_flows`` are given.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    pred, target = _tensor(pred), _tensor(target)
    l1 = l1_loss(pred, target)
    perc = perceptual_loss(pred, target, extractor)
    tea = pred.new_zeros(())
    if flows is not None and epoch < teacher_cutoff and (teacher is not None or teacher_flows is not None):
        if teacher_flows is None:
            teacher_flows = teacher(frame0, frame1, target, t)
        tea = teacher_loss(flows, teacher_flows)
    return LossBreakdown(l1, perc, tea, l1 + lam * perc + tea)
