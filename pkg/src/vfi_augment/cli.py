"""Command line entry point: ``vfi-augment {interpolate,augment,eval,train,benchmark,init}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch
import yaml

from .augment import MASK_MODES, augment_dataset, output_frame_count
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SequenceDataset
from .flownet import NetConfig, build_model, count_parameters, interpolate
from .imaging import Frame, load_frame, save_frame
from .metrics import evaluate
from .synthetic import translating_dataset
from .trainer import TrainConfig, train

log = logging.getLogger("vfi_augment")


def load_config(path: str | Path) -> dict:
    """Read a YAML (or JSON, which is valid YAML) run configuration."""
    return yaml.safe_load(Path(path).read_text()) or {}


def _load_source(spec: dict):
    if "synthetic" in spec:
        syn = spec["synthetic"]
        return translating_dataset(
            syn.get("seed", 0), syn["count"], syn.get("size", 64), syn.get("frames", 3), syn.get("max_motion", 8.0)
        )
    ds = SequenceDataset(spec["root"], spec["layout"], spec.get("list_file"))
    return [ds[i] for i in range(len(ds))]


def cmd_interpolate(args) -> int:
    model = load_checkpoint(args.ckpt).model.eval()
    a, b = (load_frame(p) for p in args.inputs)
    save_frame(interpolate(model, a, b, args.t), args.out)
    return 0


def cmd_augment(args) -> int:
    manifest = augment_dataset(args.frames, args.ckpt, args.factor, args.mask, args.out, args.poses)
    n_src = len(manifest.rows) // (args.factor - 1) + 1
    print(
        f"inserted {len(manifest.rows)} frames ({sum(r.failed for r in manifest.rows)} failed); "
        f"{len(manifest.merged)} of {output_frame_count(n_src, args.factor)} frames listed; "
        f"{manifest.total_wall_s:.2f}s"
    )
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt).model.eval()
    layout = {"frames": "frames", "triplet": "triplet"}[args.layout]
    report = evaluate(model, SequenceDataset(args.dataset, layout, args.list_file), str(args.ckpt))
    out = Path(args.report)
    report.write(out.with_suffix(".csv"), out.with_suffix(".json"))
    print(json.dumps(report.summary(), indent=2))
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    net_cfg = NetConfig.from_dict(cfg.get("net", {}))
    train_cfg = TrainConfig(**cfg.get("train", {}))
    data = cfg["data"]
    fixed = _load_source(data["fixed"])
    arbitrary = _load_source(data["arbitrary"])
    model = build_model(net_cfg, seed=cfg.get("init_seed", train_cfg.seed))
    log.info("training %d parameters on %d + %d clips", count_parameters(model), len(fixed), len(arbitrary))

    def progress(rec):
        if rec["step"] % args.log_every == 0:
            log.info("step %(step)d epoch %(epoch)d lr %(lr).2e total %(total).4f", rec)

    result = train(model, fixed, arbitrary, train_cfg, cfg.get("out_dir", "runs/train"), on_step=progress)
    print(f"wrote {len(result.checkpoints)} checkpoints; final {result.checkpoints[-1]}")
    return 0


def cmd_init(args) -> int:
    """Write a freshly initialized checkpoint (zero-initialized output heads)."""
    cfg = load_config(args.config).get("net", {}) if args.config else {}
    model = build_model(NetConfig.from_dict(cfg), seed=args.seed)
    save_checkpoint(args.out, model, seed=args.seed)
    print(f"{count_parameters(model)} parameters -> {args.out}")
    return 0


def _parse_size(text: str) -> tuple[int, int]:
    w, h = text.lower().split("x")
    return int(w), int(h)


def cmd_benchmark(args) -> int:
    model = load_checkpoint(args.ckpt).model.eval()
    rng = np.random.default_rng(0)
    rows = []
    for text in args.sizes.split(","):
        w, h = _parse_size(text)
        f0, f1 = (Frame(rng.random((h, w, 3))) for _ in range(2))
        interpolate(model, f0, f1, 0.5)  # warm-up
        times = []
        for _ in range(args.repeats):
            tick = time.perf_counter()
            interpolate(model, f0, f1, 0.5)
            times.append(1000.0 * (time.perf_counter() - tick))
        rows.append({"width": w, "height": h, "megapixels": w * h / 1e6, "ms_median": float(np.median(times))})
        print(f"{w}x{h}: {rows[-1]['ms_median']:.1f} ms")
    summary = {
        "checkpoint": str(args.ckpt),
        "parameters": count_parameters(model),
        "device": "cpu",
        "threads": torch.get_num_threads(),
        "results": rows,
    }
    Path(args.report).write_text(json.dumps(summary, indent=2) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vfi-augment", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("interpolate", help="synthesize one frame between two images")
    p.add_argument("--in", dest="inputs", nargs=2, required=True, metavar=("A", "B"))
    p.add_argument("--t", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("augment", help="k-fold frame insertion for a frame directory")
    p.add_argument("--frames", required=True)
    p.add_argument("--factor", type=int, default=2)
    p.add_argument("--mask", choices=MASK_MODES, default="none")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--poses")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("eval", help="PSNR / SSIM / IE over a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--layout", choices=("triplet", "frames"), default="triplet")
    p.add_argument("--list-file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--report", required=True, help="output stem; writes .csv and .json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train", help="train from a YAML/JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("benchmark", help="inference runtime at several resolutions")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sizes", default="1024x512,2048x1024,4096x2048")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("init", help="write a freshly initialized checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_init)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
