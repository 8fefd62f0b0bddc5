"""Frames, camera poses, image file I/O and pyramid resampling.

Pixels are kept as float64 arrays in [0, 1] with layout H x W x 3. The 8-bit
representation only exists at the file boundary.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class FrameFormatError(ValueError):
    """Raised when an image file exists but cannot be decoded."""


@dataclass(frozen=True)
class CameraPose:
    translation: np.ndarray
    rotation: np.ndarray  # unit quaternion, (w, x, y, z)

    def __post_init__(self):
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        norm = float(np.linalg.norm(rotation))
        if not np.isfinite(norm) or abs(norm - 1.0) > 1e-9:
            raise ValueError(f"rotation quaternion must have unit norm, got {norm!r}")
        object.__setattr__(self, "translation", translation)
        object.__setattr__(self, "rotation", rotation)

    @classmethod
    def from_json(cls, obj: dict) -> "CameraPose":
        quat = np.asarray(obj["rotation_quat_wxyz"], dtype=np.float64)
        norm = np.linalg.norm(quat)
        if norm == 0:
            raise ValueError("zero-norm rotation quaternion")
        return cls(np.asarray(obj["translation"], dtype=np.float64), quat / norm)

    def to_json(self) -> dict:
        return {
            "translation": [float(v) for v in self.translation],
            "rotation_quat_wxyz": [float(v) for v in self.rotation],
        }


@dataclass
class Frame:
    pixels: np.ndarray
    timestamp: Optional[float] = None
    pose: Optional[CameraPose] = None
    path: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 pixels, got shape {pixels.shape}")
        if pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise ValueError("frame must be at least 1 x 1")
        if not np.all(np.isfinite(pixels)):
            raise ValueError("frame contains non-finite pixels")
        if pixels.min() < 0.0 or pixels.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        self.pixels = pixels

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def load_frame(path: str | os.PathLike) -> Frame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such frame: {path}")
    try:
        with Image.open(path) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as err:
        raise FrameFormatError(f"cannot decode {path}: {err}") from err
    return Frame(rgb.astype(np.float64) / 255.0, path=str(path))


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_frame(frame: Frame | np.ndarray, path: str | os.PathLike) -> None:
    """Write a frame as PNG or JPEG, chosen by the file suffix."""
    pixels = frame.pixels if isinstance(frame, Frame) else np.asarray(frame)
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"parent directory does not exist: {path.parent}")
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise ValueError(f"unsupported image suffix {path.suffix!r}")
    Image.fromarray(to_uint8(pixels), mode="RGB").save(path)


@dataclass(frozen=True)
class CropRecord:
    height: int
    width: int
    pad_bottom: int = 0
    pad_right: int = 0

    @property
    def is_identity(self) -> bool:
        return self.pad_bottom == 0 and self.pad_right == 0

    def crop(self, array):
        """Undo the padding on an array (numpy H x W x C or tensor ... x H x W)."""
        if isinstance(array, Frame):
            return Frame(array.pixels[: self.height, : self.width], array.timestamp, array.pose)
        if isinstance(array, np.ndarray):
            return array[: self.height, : self.width]
        return array[..., : self.height, : self.width]


def padded_size(size: int, multiple: int) -> int:
    return -(-size // multiple) * multiple


def pad_to_multiple(frame: Frame | np.ndarray, multiple: int):
    """Edge-replicate the bottom/right borders up to the next multiple.

    Returns the padded frame (same type as the input) and a `CropRecord` that
    inverts the padding.
    """
    if multiple < 1:
        raise ValueError("multiple must be >= 1")
    pixels = frame.pixels if isinstance(frame, Frame) else np.asarray(frame)
    h, w = pixels.shape[:2]
    record = CropRecord(h, w, padded_size(h, multiple) - h, padded_size(w, multiple) - w)
    if not record.is_identity:
        widths = [(0, record.pad_bottom), (0, record.pad_right)] + [(0, 0)] * (pixels.ndim - 2)
        pixels = np.pad(pixels, widths, mode="edge")
    if isinstance(frame, Frame):
        return Frame(pixels, frame.timestamp, frame.pose), record
    return pixels, record


def downsample_half(array: np.ndarray) -> np.ndarray:
    """2x2 average pooling of an H x W x C array."""
    array = np.asarray(array)
    h, w = array.shape[:2]
    if h % 2 or w % 2:
        raise ValueError(f"downsample_half needs even dimensions, got {h}x{w}")
    return 0.25 * ((array[0::2, 0::2] + array[0::2, 1::2]) + (array[1::2, 0::2] + array[1::2, 1::2]))


def list_image_files(directory: str | os.PathLike) -> list[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_poses(path: str | os.PathLike) -> list[CameraPose]:
    """Read a JSON-lines pose file (one object per frame)."""
    poses = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                poses.append(CameraPose.from_json(json.loads(line)))
    return poses


def save_poses(poses: Sequence[CameraPose], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for pose in poses:
            fh.write(json.dumps(pose.to_json()) + "\n")
