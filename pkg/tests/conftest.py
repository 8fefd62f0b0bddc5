import numpy as np
import pytest
import torch

from vfi_augment.flownet import TINY_CONFIG as TINY, NetConfig

SMALL = NetConfig(stem_channels=(8, 8, 8), group_channels=(16, 12, 12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def bilinear_oracle(image: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Scalar-loop backward warp with border clamping."""
    import math

    h, w, c = image.shape
    out = np.zeros_like(image, dtype=np.float64)
    for y in range(h):
        for x in range(w):
            sx = min(max(x + float(flow[y, x, 0]), 0.0), w - 1.0)
            sy = min(max(y + float(flow[y, x, 1]), 0.0), h - 1.0)
            x0, y0 = int(math.floor(sx)), int(math.floor(sy))
            x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
            ax, ay = sx - x0, sy - y0
            for ch in range(c):
                top = (1 - ax) * image[y0, x0, ch] + ax * image[y0, x1, ch]
                bot = (1 - ax) * image[y1, x0, ch] + ax * image[y1, x1, ch]
                out[y, x, ch] = (1 - ay) * top + ay * bot
    return out


def gradcheck_sample(model, coords: int = 64, size: int = 16, seed: int = 0, step: float = 1e-4):
    """Compare autograd against central differences of the total loss.

    Returns (per-coordinate relative errors, names of parameters whose gradient
    is identically zero). The model must be float64.
    """
    from vfi_augment.losses import total_loss

    gen = torch.Generator().manual_seed(seed)
    shape = (2, 3, size, size)
    img0, img1, target = (torch.rand(shape, generator=gen, dtype=torch.float64) for _ in range(3))
    t = torch.rand(2, generator=gen, dtype=torch.float64)
    teacher = tuple(torch.randn(2, 2, size, size, generator=gen, dtype=torch.float64) for _ in range(2))

    def loss():
        out = model(img0, img1, t)
        return total_loss(out.frame, target, (out.flow_t0, out.flow_t1), teacher_flows=teacher).total

    model.zero_grad()
    loss().backward()
    params = [(n, p) for n, p in model.named_parameters()]
    dead = [n for n, p in params if p.grad is None or not torch.any(p.grad != 0)]

    sizes = np.array([p.numel() for _, p in params])
    pick = np.random.default_rng(seed).choice(sizes.sum(), size=coords, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    errors = []
    with torch.no_grad():
        for flat in pick:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            p = params[k][1].view(-1)
            i = int(flat - offsets[k])
            analytic = float(params[k][1].grad.view(-1)[i])
            orig = float(p[i])
            p[i] = orig + step
            up = float(loss())
            p[i] = orig - step
            down = float(loss())
            p[i] = orig
            numeric = (up - down) / (2 * step)
            scale = max(abs(analytic), abs(numeric))
            errors.append(0.0 if scale == 0 else abs(analytic - numeric) / scale)
    return np.array(errors), dead


def gradcheck_model(config=TINY, seed: int = 0, head_scale: float = 0.1, flow_offset: float = 0.5):
    """Float64 model with random heads whose final flows sit near ``flow_offset``.

    Bilinear sampling has kinks wherever a sample coordinate crosses an integer,
    so a generic test point keeps every flow component strictly between
    integers. Small head weights plus a constant flow bias do that while every
    parameter still influences the loss.
    """
    from vfi_augment.flownet import build_model

    model = build_model(config, seed=seed, zero_output=False).double()
    with torch.no_grad():
        for module in [model.base, *model.refine]:
            for head in module.output_layers():
                head.weight.mul_(head_scale)
        model.refine[-1].flow_head.bias.fill_(flow_offset)
    return model


def mse_oracle(a: np.ndarray, b: np.ndarray) -> float:
    total, count = 0.0, 0
    for value_a, value_b in zip(a.ravel().tolist(), b.ravel().tolist()):
        total += (value_a - value_b) ** 2
        count += 1
    return total / count


def psnr_oracle(a, b) -> float:
    import math

    mse = mse_oracle(a, b)
    return math.inf if mse == 0 else 10 * math.log10(1 / mse)


def ie_oracle(a, b) -> float:
    import math

    return 255 * math.sqrt(mse_oracle(a, b))


def ssim_oracle(a: np.ndarray, b: np.ndarray, size: int = 11, sigma: float = 1.5) -> float:
    """Windowed SSIM evaluated position by position over the valid region."""
    import math

    c1, c2 = 0.01**2, 0.03**2
    half = (size - 1) / 2
    g1 = [math.exp(-((i - half) ** 2) / (2 * sigma * sigma)) for i in range(size)]
    s = sum(g1)
    g1 = [v / s for v in g1]
    h, w, channels = a.shape
    per_channel = []
    for ch in range(channels):
        scores = []
        for y in range(h - size + 1):
            for x in range(w - size + 1):
                mx = my = sxx = syy = sxy = 0.0
                for dy in range(size):
                    for dx in range(size):
                        wt = g1[dy] * g1[dx]
                        va, vb = float(a[y + dy, x + dx, ch]), float(b[y + dy, x + dx, ch])
                        mx += wt * va
                        my += wt * vb
                        sxx += wt * va * va
                        syy += wt * vb * vb
                        sxy += wt * va * vb
                vx, vy, cov = sxx - mx * mx, syy - my * my, sxy - mx * my
                scores.append(((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
        per_channel.append(sum(scores) / len(scores))
    return sum(per_channel) / channels
