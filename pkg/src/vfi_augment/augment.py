"""Frame-rate augmentation of neural-rendering recordings.

Inserts ``factor - 1`` synthesized frames between every adjacent pair of a
frame directory, optionally masks them to the centered 4:3 region, carries
interpolated camera poses and timestamps along, and records a manifest.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .flownet import FlowNet, interpolate
from .imaging import CameraPose, Frame, save_frame

log = logging.getLogger(__name__)

MASK_MODES = ("none", "4:3")
_MASK_ALIASES = {"none": "none", "4:3": "4:3", "four-by-three": "4:3", "4x3": "4:3"}


def plan_insertions(frame_count: int, factor: int) -> list[tuple[int, float]]:
    """``(pair_index, t)`` for every inserted frame, in output order."""
    if frame_count < 2:
        raise ValueError("need at least 2 frames")
    if factor < 2:
        raise ValueError("factor must be >= 2")
    return [(pair, i / factor) for pair in range(frame_count - 1) for i in range(1, factor)]


def output_frame_count(frame_count: int, factor: int) -> int:
    return frame_count + (frame_count - 1) * (factor - 1)


def normalize_mask_mode(mode: str) -> str:
    try:
        return _MASK_ALIASES[mode]
    except KeyError:
        raise ValueError(f"unknown mask mode {mode!r}; expected one of {MASK_MODES}") from None


def aspect_window(height: int, width: int) -> tuple[int, int, int, int]:
    """``(top, left, h, w)`` of the largest centered 4:3 region."""
    if width * 3 >= height * 4:
        w = round(height * 4 / 3)
        return 0, (width - w) // 2, height, w
    h = round(width * 3 / 4)
    return (height - h) // 2, 0, h, width


def apply_aspect_mask(frame: Frame, mode: str = "4:3") -> Frame:
    """Zero every pixel outside the centered 4:3 window (resolution unchanged)."""
    if normalize_mask_mode(mode) == "none":
        return frame
    top, left, h, w = aspect_window(frame.height, frame.width)
    out = np.zeros_like(frame.pixels)
    out[top : top + h, left : left + w] = frame.pixels[top : top + h, left : left + w]
    return Frame(out, frame.timestamp, frame.pose)


def slerp(q0: np.ndarray, q1: np.ndarray, t: float) -> np.ndarray:
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    n0, n1 = np.linalg.norm(q0), np.linalg.norm(q1)
    if n0 == 0 or n1 == 0:
        raise ValueError("zero-norm quaternion")
    q0, q1 = q0 / n0, q1 / n1
    dot = float(np.dot(q0, q1))
    if dot < 0.0:  # q and -q are the same rotation; take the shorter arc
        q1, dot = -q1, -dot
    if dot > 0.9995:
        q = q0 + t * (q1 - q0)
    else:
        theta = np.arccos(min(dot, 1.0))
        q = (np.sin((1 - t) * theta) * q0 + np.sin(t * theta) * q1) / np.sin(theta)
    return q / np.linalg.norm(q)


def interpolate_pose(pose_a: CameraPose, pose_b: CameraPose, t: float) -> CameraPose:
    """Linear translation, shorter-arc slerp rotation."""
    if t == 0:
        return pose_a
    if t == 1:
        return pose_b
    translation = (1 - t) * pose_a.translation + t * pose_b.translation
    return CameraPose(translation, slerp(pose_a.rotation, pose_b.rotation, t))


@dataclass
class ManifestRow:
    source_frame_a: str
    source_frame_b: str
    pair_index: int
    t: float
    output: str
    pose: Optional[dict] = None
    timestamp: Optional[float] = None
    wall_ms: float = 0.0
    failed: bool = False
    error: Optional[str] = None


@dataclass
class AugmentationManifest:
    factor: int
    mask_mode: str
    model_checkpoint: str
    rows: list[ManifestRow] = field(default_factory=list)
    merged: list[str] = field(default_factory=list)
    total_wall_s: float = 0.0

    @property
    def header(self) -> dict:
        return {
            "factor": self.factor,
            "mask_mode": self.mask_mode,
            "model_checkpoint": self.model_checkpoint,
            "total_wall_s": self.total_wall_s,
            "rows": len(self.rows),
            "failed": sum(r.failed for r in self.rows),
        }

    def write(self, out_dir: str | os.PathLike) -> None:
        """``manifest.jsonl`` (one row per inserted frame), ``manifest_header.json``, ``frames.txt``."""
        out_dir = Path(out_dir)
        with open(out_dir / "manifest.jsonl", "w") as fh:
            for row in self.rows:
                fh.write(json.dumps(asdict(row), sort_keys=True) + "\n")
        (out_dir / "manifest_header.json").write_text(json.dumps(self.header, indent=2, sort_keys=True) + "\n")
        (out_dir / "frames.txt").write_text("".join(p + "\n" for p in self.merged))

    @classmethod
    def read(cls, out_dir: str | os.PathLike) -> "AugmentationManifest":
        out_dir = Path(out_dir)
        header = json.loads((out_dir / "manifest_header.json").read_text())
        rows = [ManifestRow(**json.loads(ln)) for ln in (out_dir / "manifest.jsonl").read_text().splitlines() if ln]
        merged = (out_dir / "frames.txt").read_text().splitlines()
        return cls(header["factor"], header["mask_mode"], header["model_checkpoint"], rows, merged, header["total_wall_s"])


def inserted_name(pair: int, index: int, factor: int) -> str:
    return f"interp_{pair:05d}_{index:02d}of{factor:02d}.png"


def augment_frames(
    frames: Sequence[Frame],
    model: FlowNet,
    factor: int,
    out_dir: str | os.PathLike,
    mask_mode: str = "none",
    checkpoint_id: str = "",
    names: Optional[Sequence[str]] = None,
) -> AugmentationManifest:
    """Insert synthesized frames between every adjacent pair and save them to ``out_dir``."""
    mask_mode = normalize_mask_mode(mask_mode)
    plan = plan_insertions(len(frames), factor)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = list(names) if names is not None else [f.path or f"frame_{i:05d}" for i, f in enumerate(frames)]
    manifest = AugmentationManifest(factor, mask_mode, checkpoint_id)
    merged: list[str] = [names[0]]
    start = time.perf_counter()
    for pair, t in plan:
        index = round(t * factor)
        a, b = frames[pair], frames[pair + 1]
        output = str(out_dir / inserted_name(pair, index, factor))
        row = ManifestRow(names[pair], names[pair + 1], pair, t, output)
        tick = time.perf_counter()
        try:
            frame = apply_aspect_mask(interpolate(model, a, b, t), mask_mode)
            save_frame(frame, output)
            row.timestamp = frame.timestamp
            if a.pose is not None and b.pose is not None:
                row.pose = interpolate_pose(a.pose, b.pose, t).to_json()
        except Exception as err:  # one bad pair must not abort the whole dataset
            log.error("pair %d at t=%.3f failed: %s", pair, t, err)
            row.failed = True
            row.error = str(err)
        row.wall_ms = 1000.0 * (time.perf_counter() - tick)
        manifest.rows.append(row)
        if not row.failed:
            merged.append(output)
        if index == factor - 1:
            merged.append(names[pair + 1])
    manifest.total_wall_s = time.perf_counter() - start
    manifest.merged = merged
    manifest.write(out_dir)
    return manifest


@dataclass(frozen=True)
class TimingReport:
    augmentation_s: float
    reconstruction_s: float

    @property
    def proportion_permille(self) -> float:
        return 1000.0 * self.augmentation_s / (self.augmentation_s + self.reconstruction_s)


def timing_report(manifest: AugmentationManifest | float, reconstruction_s: float) -> TimingReport:
    """Share of augmentation time in the whole augment + reconstruct process, in permille."""
    if not reconstruction_s > 0:
        raise ValueError("reconstruction time must be positive")
    augmentation_s = manifest.total_wall_s if isinstance(manifest, AugmentationManifest) else float(manifest)
    return TimingReport(augmentation_s, reconstruction_s)


def augment_dataset(
    frames_dir: str | os.PathLike,
    checkpoint: str | os.PathLike,
    factor: int,
    mask_mode: str,
    out_dir: str | os.PathLike,
    poses_file: Optional[str | os.PathLike] = None,
) -> AugmentationManifest:
    """Augment a frame directory with a saved model; see `augment_frames`."""
    from .checkpoint import load_checkpoint
    from .data import SequenceDataset
    from .imaging import load_poses

    model = load_checkpoint(checkpoint).model.eval()
    dataset = SequenceDataset(frames_dir, "frames")
    frames = dataset.frames()
    if poses_file is not None:
        poses = load_poses(poses_file)
        if len(poses) != len(frames):
            raise ValueError(f"{len(poses)} poses for {len(frames)} frames")
        for frame, pose in zip(frames, poses):
            frame.pose = pose
    names = [str(p) for p in dataset.files]
    return augment_frames(frames, model, factor, out_dir, mask_mode, str(checkpoint), names)
