"""Dataset readers, triplet sampling policies and training-time augmentation."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch

from .imaging import CameraPose, Frame, list_image_files, load_frame

log = logging.getLogger(__name__)

LAYOUT_FRAME_COUNT = {"triplet": 3, "septuplet": 7}
EXTRAPOLATION_PROB = 0.2
MIRROR_PROB = 0.5


@dataclass
class TripletSample:
    frame0: Frame
    frame_t: Frame
    frame1: Frame
    t: float


def sample_triplet_fixed(sequence: Sequence[Frame]) -> TripletSample:
    if len(sequence) != 3:
        raise ValueError(f"fixed-timestep sampling needs 3 frames, got {len(sequence)}")
    a, b, c = sequence
    return TripletSample(a, b, c, 0.5)


def triplet_from_indices(sequence: Sequence[Frame], indices: tuple[int, int, int], branch: str) -> TripletSample:
    """Build a sample from sorted indices ``i < j < k``.

    ``branch`` is one of ``interpolate`` (target j between i and k),
    ``extrapolate`` (inputs i, j; target k; t > 1) or ``extrapolate_mirror``
    (inputs j, k; target i; t < 0). In every branch
    ``t = (target - first input) / (second input - first input)``.
    """
    i, j, k = indices
    if not i < j < k:
        raise ValueError(f"indices must be strictly increasing, got {indices}")
    if branch == "interpolate":
        a, target, b = i, j, k
    elif branch == "extrapolate":
        a, b, target = i, j, k
    elif branch == "extrapolate_mirror":
        target, a, b = i, j, k
    else:
        raise ValueError(f"unknown branch {branch!r}")
    return TripletSample(sequence[a], sequence[target], sequence[b], (target - a) / (b - a))


def draw_arbitrary(rng: np.random.Generator, n_frames: int = 7) -> tuple[tuple[int, int, int], str]:
    """Draw three sorted distinct indices and the interpolation/extrapolation branch."""
    i, j, k = sorted(int(x) for x in rng.choice(n_frames, size=3, replace=False))
    if rng.random() >= EXTRAPOLATION_PROB:
        return (i, j, k), "interpolate"
    return (i, j, k), "extrapolate_mirror" if rng.random() < MIRROR_PROB else "extrapolate"


def sample_triplet_arbitrary(sequence: Sequence[Frame], rng: np.random.Generator) -> TripletSample:
    if len(sequence) != 7:
        raise ValueError(f"arbitrary-timestep sampling needs 7 frames, got {len(sequence)}")
    indices, branch = draw_arbitrary(rng, 7)
    return triplet_from_indices(sequence, indices, branch)


@dataclass(frozen=True)
class AugmentConfig:
    crop: Optional[int] = 256
    flip: bool = True
    time_reversal: bool = True
    rotation: bool = True
    channel_permutation: bool = True

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(crop=None, flip=False, time_reversal=False, rotation=False, channel_permutation=False)


def time_reverse(sample: TripletSample) -> TripletSample:
    return TripletSample(sample.frame1, sample.frame_t, sample.frame0, 1.0 - sample.t)


def _map_frames(sample: TripletSample, fn) -> TripletSample:
    return TripletSample(
        Frame(fn(sample.frame0.pixels)), Frame(fn(sample.frame_t.pixels)), Frame(fn(sample.frame1.pixels)), sample.t
    )


def augment_sample(
    sample: TripletSample, rng: np.random.Generator, config: AugmentConfig = AugmentConfig()
) -> TripletSample:
    """Random crop, flips, time reversal, 90-degree rotation and channel permutation.

    Every transform uses the same parameters for all three frames. Draws are
    made for every transform even when it is disabled, so toggling one transform
    does not change the others' randomness.
    """
    h, w = sample.frame0.height, sample.frame0.width
    crop = config.crop
    top = left = 0
    if crop is not None:
        if h < crop or w < crop:
            log.warning("frames %dx%d smaller than crop %d; crop skipped", h, w, crop)
            crop = None
        else:
            top = int(rng.integers(0, h - crop + 1))
            left = int(rng.integers(0, w - crop + 1))
    flip_h, flip_v, reverse = rng.random(3) < 0.5
    k_rot = int(rng.integers(0, 4))
    perm = rng.permutation(3)

    if crop is not None:
        sample = _map_frames(sample, lambda p: p[top : top + crop, left : left + crop])
    if config.flip and flip_h:
        sample = _map_frames(sample, lambda p: p[:, ::-1])
    if config.flip and flip_v:
        sample = _map_frames(sample, lambda p: p[::-1])
    if config.rotation and k_rot:
        fh, fw = sample.frame0.height, sample.frame0.width
        # odd quarter turns would change the shape of non-square frames inside a batch
        if fh == fw or k_rot == 2:
            sample = _map_frames(sample, lambda p: np.rot90(p, k_rot))
    if config.channel_permutation:
        sample = _map_frames(sample, lambda p: p[..., perm])
    if config.time_reversal and reverse:
        sample = time_reverse(sample)
    return sample


class SequenceDataset:
    """Clips stored on disk.

    ``triplet`` / ``septuplet``: Vimeo-style ``sequences/<clip>/im1.png ...``
    with a newline-separated list file of clip paths. ``frames``: one directory
    of lexicographically ordered images with an optional ``manifest.json``.
    """

    def __init__(self, root: str | os.PathLike, layout: str, list_file: Optional[str | os.PathLike] = None):
        self.root = Path(root)
        self.layout = layout
        if layout in LAYOUT_FRAME_COUNT:
            self.clips = self._read_clip_list(list_file)
        elif layout == "frames":
            self.files = list_image_files(self.root)
            if len(self.files) < 2:
                raise ValueError(f"{self.root}: frames layout needs at least 2 images")
            self.metadata = read_frames_manifest(self.root)
        else:
            raise ValueError(f"unknown layout {layout!r}")

    def _read_clip_list(self, list_file):
        seq_root = self.root / "sequences" if (self.root / "sequences").is_dir() else self.root
        if list_file is None:
            clips = sorted(p for p in seq_root.rglob("*") if p.is_dir() and (p / "im1.png").exists())
        else:
            names = [ln.strip() for ln in Path(list_file).read_text().splitlines() if ln.strip()]
            clips = [seq_root / name for name in names]
        want = LAYOUT_FRAME_COUNT[self.layout]
        for clip in clips:
            found = sum((clip / f"im{i}.png").exists() for i in range(1, want + 1))
            if found != want:
                raise ValueError(f"{clip}: expected {want} frames, found {found}")
        return clips

    def __len__(self) -> int:
        if self.layout == "frames":
            return len(self.files)
        return len(self.clips)

    def __getitem__(self, index: int) -> list[Frame]:
        if self.layout == "frames":
            return [self.load_frame(index)]
        n = LAYOUT_FRAME_COUNT[self.layout]
        return [load_frame(self.clips[index] / f"im{i}.png") for i in range(1, n + 1)]

    def load_frame(self, index: int) -> Frame:
        frame = load_frame(self.files[index])
        meta = self.metadata.get(self.files[index].name, {})
        frame.timestamp = meta.get("timestamp")
        if "pose" in meta:
            frame.pose = CameraPose.from_json(meta["pose"])
        return frame

    def frames(self) -> list[Frame]:
        return [self.load_frame(i) for i in range(len(self.files))]


def read_frames_manifest(root: Path) -> dict:
    """Per-file metadata from an optional ``manifest.json``.

    Accepts either ``{"frames": [{"file": ..., "timestamp": ..., "pose": {...}}]}``
    or a plain list of such objects.
    """
    path = Path(root) / "manifest.json"
    if not path.exists():
        return {}
    data = json.loads(path.read_text())
    entries = data["frames"] if isinstance(data, dict) else data
    return {entry["file"]: entry for entry in entries}


@dataclass
class Batch:
    kind: str  # "fixed" or "arbitrary"
    frame0: torch.Tensor
    frame_t: torch.Tensor
    frame1: torch.Tensor
    t: torch.Tensor


def _stack(frames: Sequence[Frame]) -> torch.Tensor:
    return torch.from_numpy(np.stack([f.pixels for f in frames]).astype(np.float32)).permute(0, 3, 1, 2).contiguous()


def collate(kind: str, samples: Sequence[TripletSample]) -> Batch:
    return Batch(
        kind,
        _stack([s.frame0 for s in samples]),
        _stack([s.frame_t for s in samples]),
        _stack([s.frame1 for s in samples]),
        torch.tensor([s.t for s in samples], dtype=torch.float32),
    )


class _SourceCursor:
    """Shuffled pass over one source; reshuffles on exhaustion."""

    def __init__(self, size: int, seed: int, source_id: int):
        if size < 1:
            raise ValueError("training source is empty")
        self.size = size
        self.key = (seed, source_id)
        self.epoch = 0
        self.pos = 0
        self.order = self._shuffle()

    def _shuffle(self):
        return np.random.default_rng([*self.key, self.epoch, 7]).permutation(self.size)

    def take(self, n: int) -> list[int]:
        out = []
        while len(out) < n:
            if self.pos == self.size:
                self.epoch += 1
                self.pos = 0
                self.order = self._shuffle()
            out.append(int(self.order[self.pos]))
            self.pos += 1
        return out


def interleave_batches(
    fixed: Sequence[Sequence[Frame]],
    arbitrary: Sequence[Sequence[Frame]],
    seed: int,
    batch_size: int = 16,
    augment: AugmentConfig = AugmentConfig(),
    workers: int = 0,
) -> Iterator[Batch]:
    """Endless stream alternating one fixed-timestep batch and one arbitrary-timestep batch.

    Each sample's randomness is derived from ``(seed, source, draw index)``, so
    the stream is identical for any number of ``workers``.
    """
    if len(fixed) == 0 or len(arbitrary) == 0:
        raise ValueError("both training sources must be non-empty")
    cursors = {"fixed": _SourceCursor(len(fixed), seed, 0), "arbitrary": _SourceCursor(len(arbitrary), seed, 1)}
    sources = {"fixed": fixed, "arbitrary": arbitrary}
    draws = {"fixed": 0, "arbitrary": 0}
    pool = ThreadPoolExecutor(workers) if workers > 0 else None

    def make(kind: str, index: int, draw: int) -> TripletSample:
        rng = np.random.default_rng([seed, 0 if kind == "fixed" else 1, draw])
        seq = sources[kind][index]
        sample = sample_triplet_fixed(seq) if kind == "fixed" else sample_triplet_arbitrary(seq, rng)
        return augment_sample(sample, rng, augment)

    try:
        while True:
            for kind in ("fixed", "arbitrary"):
                indices = cursors[kind].take(batch_size)
                jobs = [(kind, idx, draws[kind] + n) for n, idx in enumerate(indices)]
                draws[kind] += batch_size
                if pool is None:
                    samples = [make(*job) for job in jobs]
                else:
                    samples = list(pool.map(lambda job: make(*job), jobs))
                yield collate(kind, samples)
    finally:
        if pool is not None:
            pool.shutdown(wait=False)
