"""AdamW training loop with linear warmup and cosine annealing."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import torch

from .checkpoint import OptimizerState, save_checkpoint
from .data import AugmentConfig, interleave_batches
from .flownet import FlowNet
from .imaging import Frame
from .losses import PERCEPTUAL_WEIGHT, BlockMatchingTeacher, scaled_teacher_cutoff, total_loss

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    total_epochs: int = 300
    batch_size: int = 16
    peak_lr: float = 3e-4
    final_lr: float = 3e-6
    warmup_steps: int = 2000
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: Optional[float] = 1.0
    teacher_cutoff_epochs: Optional[int] = None  # None: 200 of 300 epochs, scaled
    perceptual_weight: float = PERCEPTUAL_WEIGHT
    use_teacher: bool = True
    steps_per_epoch: Optional[int] = None  # None: one pass over the larger source, both sources interleaved
    checkpoint_every: int = 1
    seed: int = 0
    workers: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if not 0 < self.final_lr <= self.peak_lr:
            raise ValueError("need 0 < final_lr <= peak_lr")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")

    @property
    def teacher_cutoff(self) -> int:
        if self.teacher_cutoff_epochs is not None:
            return self.teacher_cutoff_epochs
        return scaled_teacher_cutoff(self.total_epochs)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at_step(step: int, config: TrainConfig, max_steps: int) -> float:
    """Learning rate at ``step`` of a schedule ending at ``max_steps``."""
    if not 0 <= step <= max_steps:
        raise ValueError(f"step {step} outside [0, {max_steps}]")
    warmup = config.warmup_steps
    if step < warmup:
        return config.peak_lr * (step + 1) / warmup
    span = max_steps - warmup
    progress = (step - warmup) / span if span > 0 else 1.0
    return config.final_lr + 0.5 * (config.peak_lr - config.final_lr) * (1 + math.cos(math.pi * progress))


def optimizer_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: OptimizerState,
    lr: float,
    config: TrainConfig,
) -> bool:
    """One in-place AdamW update with decoupled weight decay.

    Returns False (and counts a skip) when any gradient is non-finite; the
    parameters and moments are then left untouched.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape mismatch for {name}")
    if not all(torch.isfinite(g).all() for g in grads.values()):
        state.skipped += 1
        log.warning("non-finite gradient at step %d; update skipped (%d so far)", state.step, state.skipped)
        return False
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            update = (m / c1) / ((v / c2).sqrt() + config.eps) + config.weight_decay * p
            p.sub_(lr * update)
    return True


def clip_gradients(grads: dict[str, torch.Tensor], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if math.isfinite(norm) and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g.mul_(scale)
    return norm


@dataclass
class TrainResult:
    model: FlowNet
    history: list[dict]
    checkpoints: list[Path]
    optimizer: OptimizerState


def steps_per_epoch(fixed_len: int, arbitrary_len: int, config: TrainConfig) -> int:
    if config.steps_per_epoch is not None:
        return config.steps_per_epoch
    return 2 * math.ceil(max(fixed_len, arbitrary_len) / config.batch_size)


def train(
    model: FlowNet,
    fixed: Sequence[Sequence[Frame]],
    arbitrary: Sequence[Sequence[Frame]],
    config: TrainConfig,
    out_dir: Optional[str | os.PathLike] = None,
    teacher=None,
    extractor=None,
    on_step: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Train on interleaved fixed- and arbitrary-timestep batches.

    Writes ``metrics.jsonl`` (one object per step) and a checkpoint every
    ``checkpoint_every`` epochs into ``out_dir`` when given. With zero epochs
    the initial model is checkpointed unchanged.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if teacher is None and config.use_teacher:
        teacher = BlockMatchingTeacher()
    torch.manual_seed(config.seed)

    per_epoch = steps_per_epoch(len(fixed), len(arbitrary), config)
    max_steps = config.total_epochs * per_epoch
    params = dict(model.named_parameters())
    state = OptimizerState()
    history: list[dict] = []
    checkpoints: list[Path] = []
    cutoff = config.teacher_cutoff
    dtype = next(model.parameters()).dtype

    def checkpoint(name: str, epoch: int, extra=None):
        if out is None:
            return
        path = out / name
        save_checkpoint(path, model, epoch=epoch, seed=config.seed, optimizer=state, extra=extra)
        checkpoints.append(path)

    if max_steps == 0:
        checkpoint("final.npz", 0)
        return TrainResult(model, history, checkpoints, state)

    log_fh = open(out / "metrics.jsonl", "w") if out is not None else None
    stream = interleave_batches(fixed, arbitrary, config.seed, config.batch_size, config.augment, config.workers)
    model.train()
    try:
        for step in range(max_steps):
            epoch = step // per_epoch
            batch = next(stream)
            f0, f1, ft, t = (x.to(dtype) for x in (batch.frame0, batch.frame1, batch.frame_t, batch.t))
            pred = model(f0, f1, t)
            teacher_flows = None
            if teacher is not None and epoch < cutoff:
                teacher_flows = teacher(f0, f1, ft, t)
            losses = total_loss(
                pred.frame,
                ft,
                (pred.flow_t0, pred.flow_t1),
                teacher_flows=teacher_flows,
                epoch=epoch,
                teacher_cutoff=cutoff,
                lam=config.perceptual_weight,
                extractor=extractor,
            )
            lr = lr_at_step(step, config, max_steps - 1)
            record = {"step": step, "epoch": epoch, "lr": lr, **losses.as_floats()}
            if not math.isfinite(record["total"]):
                checkpoint("diverged.npz", epoch, extra={"step": step, "record": record})
                raise TrainingDiverged(f"non-finite loss at step {step}: {record}")

            model.zero_grad(set_to_none=True)
            losses.total.backward()
            grads = {n: p.grad if p.grad is not None else torch.zeros_like(p) for n, p in params.items()}
            if config.grad_clip is not None:
                clip_gradients(grads, config.grad_clip)
            optimizer_step(params, grads, state, lr, config)

            history.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
            if on_step is not None:
                on_step(record)
            if (step + 1) % per_epoch == 0 and (epoch + 1) % config.checkpoint_every == 0:
                checkpoint(f"epoch{epoch + 1:04d}.npz", epoch + 1)
    finally:
        if log_fh is not None:
            log_fh.close()
        stream.close()
    model.eval()
    checkpoint("final.npz", config.total_epochs)
    return TrainResult(model, history, checkpoints, state)
