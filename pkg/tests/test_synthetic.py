import numpy as np

from vfi_augment.synthetic import random_texture, translating_clip, translating_dataset


def render_oracle(texture, h, w, offset):
    """Per-pixel evaluation of the texture formula."""
    out = np.zeros((h, w, 3))
    for y in range(h):
        for x in range(w):
            px, py = x + offset[0], y + offset[1]
            value = texture.background.copy()
            for (cx, cy), s, col in zip(texture.centers, texture.sigmas, texture.colors):
                value += np.exp(-((px - cx) ** 2 + (py - cy) ** 2) / (2 * s * s)) * col
            for (fx, fy), ph, col in zip(texture.freqs, texture.phases, texture.wave_colors):
                value += np.sin(fx * px + fy * py + ph) * col
            out[y, x] = np.clip(value, 0, 1)
    return out


def test_render_matches_pointwise_formula(rng):
    texture = random_texture(rng, extent=20)
    np.testing.assert_allclose(texture.render(9, 11, (1.25, -0.5)), render_oracle(texture, 9, 11, (1.25, -0.5)), atol=1e-12)


def test_clip_shapes_and_motion_bound(rng):
    clip, motion = translating_clip(rng, size=32, frames=5, max_motion=6)
    assert np.all(np.abs(motion) <= 6)
    assert len(clip) == 5 and all(f.pixels.shape == (32, 32, 3) for f in clip)


def test_integer_shift_consistency():
    texture = random_texture(np.random.default_rng(0), extent=40)
    a = texture.render(16, 16, (2.0, 1.0))
    b = texture.render(16, 16, (0.0, 0.0))
    np.testing.assert_allclose(a[:-1, :-2], b[1:, 2:], atol=1e-12)


def test_dataset_is_seeded():
    a = translating_dataset(5, 2, size=16)
    b = translating_dataset(5, 2, size=16)
    c = translating_dataset(6, 2, size=16)
    assert all(np.array_equal(x.pixels, y.pixels) for ca, cb in zip(a, b) for x, y in zip(ca, cb))
    assert not np.array_equal(a[0][0].pixels, c[0][0].pixels)
