"""Synthetic translating-texture clips with exactly known motion.

Textures are sums of random Gaussian blobs and low-amplitude sinusoids,
evaluated analytically at continuous coordinates, so every frame of a clip is
an exact sub-pixel translation of the same texture.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import Frame


@dataclass(frozen=True)
class Texture:
    centers: np.ndarray  # K x 2 (x, y)
    sigmas: np.ndarray  # K
    colors: np.ndarray  # K x 3
    freqs: np.ndarray  # S x 2
    phases: np.ndarray  # S
    wave_colors: np.ndarray  # S x 3
    background: np.ndarray  # 3

    def render(self, height: int, width: int, offset=(0.0, 0.0)) -> np.ndarray:
        """Texture sampled at ``(x + offset_x, y + offset_y)`` for every pixel."""
        x = np.arange(width, dtype=np.float64) + offset[0]
        y = np.arange(height, dtype=np.float64) + offset[1]
        # isotropic Gaussians are separable: exp(-(dx^2 + dy^2)) = exp(-dx^2) exp(-dy^2)
        denom = 2 * self.sigmas[:, None] ** 2
        gx = np.exp(-((x[None, :] - self.centers[:, :1]) ** 2) / denom)
        gy = np.exp(-((y[None, :] - self.centers[:, 1:]) ** 2) / denom)
        img = np.stack([gy.T @ (gx * col[:, None]) for col in self.colors.T], axis=-1) + self.background
        ys, xs = np.meshgrid(y, x, indexing="ij")
        for (fx, fy), ph, col in zip(self.freqs, self.phases, self.wave_colors):
            img += np.sin(fx * xs + fy * ys + ph)[..., None] * col
        return np.clip(img, 0.0, 1.0)


def random_texture(
    rng: np.random.Generator, extent: float = 96.0, density: float = 150.0, waves: int = 4
) -> Texture:
    """Random texture covering ``[-24, extent + 24]^2``.

    ``density`` is the number of blobs per 100 x 100 pixels. Blob radii of a
    few pixels keep the texture busy enough that a plain cross-fade of the two
    end frames is a poor guess for the middle one.
    """
    margin = 24.0
    side = extent + 2 * margin
    blobs = max(1, round(density * side * side / 1e4))
    return Texture(
        centers=rng.uniform(-margin, extent + margin, size=(blobs, 2)),
        sigmas=rng.uniform(1.5, 3.5, size=blobs),
        colors=rng.uniform(-0.35, 0.35, size=(blobs, 3)),
        freqs=rng.uniform(-0.6, 0.6, size=(waves, 2)),
        phases=rng.uniform(0, 2 * np.pi, size=waves),
        wave_colors=rng.uniform(-0.06, 0.06, size=(waves, 3)),
        background=rng.uniform(0.3, 0.7, size=3),
    )


def translating_clip(
    rng: np.random.Generator, size: int = 64, frames: int = 3, max_motion: float = 8.0
) -> tuple[list[Frame], np.ndarray]:
    """A clip whose first and last frames are ``motion`` pixels apart.

    Frames are evenly spaced in time, so frame ``i`` is displaced by
    ``i / (frames - 1) * motion``. Returns the frames and the motion (dx, dy).
    """
    texture = random_texture(rng, extent=size + 2 * max_motion)
    motion = rng.uniform(-max_motion, max_motion, size=2)
    origin = np.full(2, max_motion)
    clip = []
    for i in range(frames):
        s = i / (frames - 1)
        clip.append(Frame(texture.render(size, size, origin + s * motion)))
    return clip, motion


def translating_dataset(seed: int, count: int, size: int = 64, frames: int = 3, max_motion: float = 8.0):
    rng = np.random.default_rng(seed)
    return [translating_clip(rng, size, frames, max_motion)[0] for _ in range(count)]
