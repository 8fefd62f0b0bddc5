import numpy as np
import pytest
import torch
import torch.nn as nn
from conftest import SMALL, TINY, gradcheck_model, gradcheck_sample

from vfi_augment.flownet import (
    BlockOutput,
    NetConfig,
    build_model,
    count_parameters,
    flows_for,
    interpolate,
)
from vfi_augment.imaging import Frame


def random_model(config=SMALL, seed=0):
    return build_model(config, seed=seed, zero_output=False).double()


def batch(n, size, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return (torch.rand(n, 3, size, size, generator=gen, dtype=torch.float64) for _ in range(2))


def test_default_parameter_count():
    n = count_parameters(build_model())
    assert n == 5_085_321
    assert 4.3e6 <= n <= 5.9e6


def test_parameter_count_examples():
    assert count_parameters(nn.Conv2d(3, 8, 3)) == 224
    assert count_parameters([]) == 0
    assert count_parameters({}) == 0
    shared = torch.zeros(5)
    assert count_parameters([shared, shared, torch.zeros(2)]) == 7
    assert count_parameters(build_model(TINY)) == 4728


def test_config_validation():
    with pytest.raises(ValueError):
        NetConfig(expansion_rate=3)
    with pytest.raises(ValueError):
        NetConfig(stem_channels=(8, 8))
    with pytest.raises(ValueError):
        NetConfig(mask_activation="softmax")
    assert NetConfig.from_dict(SMALL.to_dict()) == SMALL


def test_shapes_at_every_scale():
    model = random_model()
    img0, img1 = batch(2, 64)
    out = model(img0, img1, torch.tensor([0.3, 0.7], dtype=torch.float64))
    assert out.frame.shape == (2, 3, 64, 64)
    for block, size in zip(out.blocks, (16, 32, 64)):
        assert block.flow_t0.shape == (2, 2, size, size)
        assert block.flow_t1.shape == (2, 2, size, size)
        assert block.mask.shape == (2, 1, size, size)
        assert block.mask.min() >= 0 and block.mask.max() <= 1


def test_base_block_shape_contract():
    model = random_model()
    q0, q1 = batch(1, 64)
    out = model.base_block_forward(q0, q1, 0.5)
    assert out.flow_t0.shape == (1, 2, 64, 64) and out.mask.shape == (1, 1, 64, 64)


def test_refinement_block_shape_and_mismatch():
    model = random_model()
    a, b = batch(1, 128)
    zero = torch.zeros(1, 2, 128, 128, dtype=torch.float64)
    prior = BlockOutput(zero, zero, torch.full((1, 1, 128, 128), 0.5, dtype=torch.float64))
    out = model.refinement_block_forward(1, a, b, prior)
    assert out.flow_t0.shape == (1, 2, 128, 128)
    bad = BlockOutput(*(x[..., :64, :64] for x in prior))
    with pytest.raises(ValueError):
        model.refinement_block_forward(1, a, b, bad)


def test_pair_symmetry():
    model = random_model()
    img0, img1 = batch(4, 64, seed=3)
    t = torch.tensor([0.1, 0.5, 0.8, 1.7], dtype=torch.float64)
    a = model(img0, img1, t)
    b = model(img1, img0, 1 - t)
    torch.testing.assert_close(a.flow_t0, b.flow_t1, atol=1e-10, rtol=0)
    torch.testing.assert_close(a.flow_t1, b.flow_t0, atol=1e-10, rtol=0)
    torch.testing.assert_close(a.mask, 1 - b.mask, atol=1e-10, rtol=0)
    torch.testing.assert_close(a.frame, b.frame, atol=1e-10, rtol=0)


def test_zero_init_gives_linear_blend(rng):
    model = build_model(SMALL, seed=5)
    out = model(*(torch.rand(1, 3, 32, 32) for _ in range(2)), 0.3)
    assert torch.all(out.flow_t0 == 0) and torch.all(out.flow_t1 == 0)
    assert torch.all(out.mask == 0.5)
    f0, f1 = Frame(rng.random((40, 50, 3))), Frame(rng.random((40, 50, 3)))
    mid = interpolate(model, f0, f1, 0.5)
    assert mid.pixels.shape == (40, 50, 3)
    np.testing.assert_allclose(mid.pixels, 0.5 * (f0.pixels + f1.pixels), atol=1e-6, rtol=0)


def test_zero_init_refinement_keeps_prior():
    model = build_model(SMALL).double()
    a, b = batch(1, 32)
    gen = torch.Generator().manual_seed(1)
    prior = BlockOutput(
        torch.randn(1, 2, 32, 32, generator=gen, dtype=torch.float64),
        torch.randn(1, 2, 32, 32, generator=gen, dtype=torch.float64),
        torch.rand(1, 1, 32, 32, generator=gen, dtype=torch.float64),
    )
    out = model.refinement_block_forward(0, a, b, prior)
    assert torch.equal(out.flow_t0, prior.flow_t0) and torch.equal(out.flow_t1, prior.flow_t1)
    assert torch.all(out.mask == 0.5)


def test_constant_image_absorption():
    model = random_model()
    const = Frame(np.full((37, 45, 3), 0.37))
    out = interpolate(model, const, const, 0.42)
    np.testing.assert_allclose(out.pixels, 0.37, atol=1e-12)


def test_interpolate_is_symmetric_at_half(rng):
    model = random_model()
    f0, f1 = Frame(rng.random((48, 40, 3))), Frame(rng.random((48, 40, 3)))
    a = interpolate(model, f0, f1, 0.5)
    b = interpolate(model, f1, f0, 0.5)
    np.testing.assert_allclose(a.pixels, b.pixels, atol=1e-5, rtol=0)


def test_interpolate_contracts(rng):
    model = build_model(TINY)
    f0 = Frame(rng.random((32, 32, 3)), timestamp=1.0)
    f1 = Frame(rng.random((32, 32, 3)), timestamp=2.0)
    assert interpolate(model, f0, f1, 0.25).timestamp == 1.25
    with pytest.raises(ValueError):
        interpolate(model, f0, Frame(rng.random((32, 16, 3))), 0.5)
    with pytest.raises(ValueError):
        interpolate(model, f0, f1, float("nan"))
    with pytest.raises(ValueError):
        model(torch.rand(1, 3, 24, 32), torch.rand(1, 3, 24, 32), 0.5)
    # extrapolation is allowed
    assert interpolate(model, f0, f1, 1.5).pixels.shape == (32, 32, 3)


def test_flows_for_crops_to_frame(rng):
    model = random_model(TINY)
    f0, f1 = Frame(rng.random((20, 30, 3))), Frame(rng.random((20, 30, 3)))
    out = flows_for(model, f0, f1, 0.5)
    assert out.flow_t0.shape[-2:] == (20, 30) and out.mask.shape[-2:] == (20, 30)


def test_init_is_seeded():
    a, b, c = build_model(TINY, seed=1), build_model(TINY, seed=1), build_model(TINY, seed=2)
    for (_, p), (_, q), (_, r) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        assert torch.equal(p, q)
    assert not all(torch.equal(p, r) for p, r in zip(a.parameters(), c.parameters()))


def test_gradients_match_finite_differences():
    errors, dead = gradcheck_sample(gradcheck_model(), coords=24, seed=1)
    assert dead == []
    assert errors.max() < 1e-3
