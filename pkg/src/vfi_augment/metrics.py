"""Image quality metrics and the evaluation harness."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.ndimage import correlate1d

from .data import SequenceDataset
from .flownet import FlowNet, interpolate
from .imaging import Frame

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pixels(x) -> np.ndarray:
    return np.asarray(x.pixels if isinstance(x, Frame) else x, dtype=np.float64)


def _pair(predicted, target):
    a, b = _pixels(predicted), _pixels(target)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(predicted, target) -> float:
    """PSNR in dB over all pixels and channels with peak 1.0; ``inf`` for identical inputs."""
    a, b = _pair(predicted, target)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def interpolation_error(predicted, target) -> float:
    """Root-mean-square difference on the 0-255 scale."""
    a, b = _pair(predicted, target)
    return 255.0 * math.sqrt(float(np.mean((a - b) ** 2)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return out[r:-r, r:-r] if r else out


def ssim(predicted, target) -> float:
    """Single-scale SSIM (11x11 Gaussian, sigma 1.5, data range 1), averaged over channels."""
    a, b = _pair(predicted, target)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"ssim needs both sides >= {SSIM_WINDOW}, got {a.shape[:2]}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    g = gaussian_window()
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


@dataclass
class EvalReport:
    dataset: str
    checkpoint: str
    rows: list[dict] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    def _mean(self, key: str) -> Optional[float]:
        values = [r[key] for r in self.rows if math.isfinite(r[key])]
        return float(np.mean(values)) if values else None

    def summary(self) -> dict:
        n_inf = sum(1 for r in self.rows if not math.isfinite(r["psnr"]))
        return {
            "dataset": self.dataset,
            "checkpoint": self.checkpoint,
            "n": len(self.rows),
            "psnr_mean": self._mean("psnr"),
            "ssim_mean": self._mean("ssim"),
            "ie_mean": self._mean("ie"),
            "psnr_infinite": n_inf,
            "skipped": len(self.skipped),
        }

    def write(self, csv_path: str | os.PathLike, json_path: Optional[str | os.PathLike] = None) -> None:
        csv_path = Path(csv_path)
        json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
        keys = ["sample", "t", "psnr", "ssim", "ie"]
        extra = sorted({k for r in self.rows for k in r} - set(keys))
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys + extra)
            writer.writeheader()
            writer.writerows(self.rows)
        json_path.write_text(json.dumps(self.summary(), indent=2) + "\n")


def iter_eval_samples(dataset: SequenceDataset):
    """Yield ``(sample_id, loader)`` where ``loader()`` returns ``(frame0, target, frame1, t)``."""
    if dataset.layout == "triplet":
        for i, clip in enumerate(dataset.clips):
            yield str(clip.relative_to(dataset.root)) if clip.is_relative_to(dataset.root) else str(clip), (
                lambda i=i: (*dataset[i], 0.5)
            )
    elif dataset.layout == "frames":
        for i in range(len(dataset) - 2):

            def load(i=i):
                f0, ft, f1 = (dataset.load_frame(j) for j in (i, i + 1, i + 2))
                t = 0.5
                if None not in (f0.timestamp, ft.timestamp, f1.timestamp) and f1.timestamp != f0.timestamp:
                    t = (ft.timestamp - f0.timestamp) / (f1.timestamp - f0.timestamp)
                return f0, ft, f1, t

            yield dataset.files[i + 1].name, load
    else:
        raise ValueError(f"evaluation needs a triplet or frames dataset, got {dataset.layout!r}")


def evaluate(
    model: FlowNet,
    dataset: SequenceDataset,
    checkpoint_id: str = "",
    extra_metrics: Optional[dict[str, Callable[[Frame, Frame], float]]] = None,
) -> EvalReport:
    """Interpolate every sample at its own ``t`` and score it.

    ``extra_metrics`` is the slot for metrics needing external networks
    (e.g. LPIPS); they are not computed by default.
    """
    report = EvalReport(str(dataset.root), checkpoint_id)
    samples = list(iter_eval_samples(dataset))
    if not samples:
        raise ValueError(f"dataset {dataset.root} has no evaluation samples")
    for sample_id, load in samples:
        try:
            f0, target, f1, t = load()
        except (OSError, ValueError) as err:
            log.warning("skipping %s: %s", sample_id, err)
            report.skipped.append(sample_id)
            continue
        pred = interpolate(model, f0, f1, t)
        row = {
            "sample": sample_id,
            "t": t,
            "psnr": psnr(pred, target),
            "ssim": ssim(pred, target),
            "ie": interpolation_error(pred, target),
        }
        for name, fn in (extra_metrics or {}).items():
            row[name] = fn(pred, target)
        report.rows.append(row)
    report.rows.sort(key=lambda r: r["sample"])
    if not report.rows:
        raise ValueError(f"no readable samples in {dataset.root}")
    return report
