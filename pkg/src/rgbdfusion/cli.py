"""Command line front end: train / eval / ablate / bench / dump-attention."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import dataclass, asdict

import numpy as np

from .tensor import Tensor
from .fusion import VARIANTS
from .network import (ModelConfig, SegmentationModel, model_forward,
                      multi_scale_infer, save_checkpoint, load_checkpoint)
from .data import (AugmentPolicy, SceneSpec, Sample, generate_sample,
                   read_manifest, read_sample)
from .train import (MetricAccumulator, TrainingDiverged, predict_labels, train_loop)
from .costs import count_model

# published reference numbers for the five fusion variants, carried through
# as static annotation columns in ablation reports
REFERENCE_MIOU = {"cat": 47.0, "se_mhsa": 49.9, "lafs": 49.1, "cma": 49.6, "lafs_cma": 54.1}
REFERENCE_FPS = {"cat": 77.5, "se_mhsa": 65.7, "lafs": 75.7, "cma": 67.4, "lafs_cma": 65.5}

WARMUP_RUNS = 5
TIMED_RUNS = 30


@dataclass
class RunReport:
    variant: str
    params: int
    macs: int
    latency_ms_mean: float
    latency_ms_std: float
    miou: float
    pixel_acc: float
    seed: int
    config_hash: str
    diverged: bool = False


REPORT_FIELDS = list(RunReport.__dataclass_fields__) + ["ref_miou", "ref_fps"]


def _load_config(args, variant=None):
    cfg = ModelConfig.from_json(args.config) if args.config else ModelConfig()
    if variant or getattr(args, "variant", None):
        d = cfg.to_dict()
        d["variant"] = variant or args.variant
        cfg = ModelConfig.from_dict(d)
    return cfg


def _scene_spec(cfg):
    h, w = cfg.input_size
    return SceneSpec(height=h, width=w)


def _load_split(args, cfg, split, count, seed_base):
    if getattr(args, "data", None):
        entries = [e for e in read_manifest(args.data) if e[2] == split]
        return [read_sample(path) for _, path, _ in entries]
    spec = _scene_spec(cfg)
    offset = 0 if split == "train" else 100_000
    return [generate_sample(seed_base + offset + i, spec) for i in range(count)]


def _write_reports(out_dir, reports):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        writer.writeheader()
        for r in reports:
            row = asdict(r)
            row["ref_miou"] = REFERENCE_MIOU[r.variant]
            row["ref_fps"] = REFERENCE_FPS[r.variant]
            writer.writerow(row)
    with open(os.path.join(out_dir, "report.jsonl"), "w") as fh:
        for r in reports:
            row = asdict(r)
            row["ref_miou"] = REFERENCE_MIOU[r.variant]
            row["ref_fps"] = REFERENCE_FPS[r.variant]
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _write_trace(out_dir, trace):
    with open(os.path.join(out_dir, "trace.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "epoch", "lr", "loss"])
        for row in trace:
            writer.writerow([row.step, row.epoch, f"{row.lr:.12g}", f"{row.loss:.12g}"])


def _evaluate_model(model, samples, scales=None):
    acc = MetricAccumulator(model.cfg.num_classes)
    for s in samples:
        if scales and scales != [1.0]:
            logits = multi_scale_infer(Tensor(s.rgb), Tensor(s.depth), model, scales)
        else:
            logits = model_forward(Tensor(s.rgb), Tensor(s.depth), model)
        acc.update(predict_labels(logits), s.labels)
    return acc.miou(), acc.pixel_accuracy()


def _time_forward(model, sample):
    rgb, depth = Tensor(sample.rgb), Tensor(sample.depth)
    for _ in range(WARMUP_RUNS):
        model_forward(rgb, depth, model)
    times = []
    for _ in range(TIMED_RUNS):
        t0 = time.perf_counter()
        model_forward(rgb, depth, model)
        times.append((time.perf_counter() - t0) * 1000.0)
    return float(np.mean(times)), float(np.std(times))


def _train_one(cfg, args, seed):
    model = SegmentationModel(cfg, seed=seed)
    train_samples = _load_split(args, cfg, "train", args.train_samples, seed_base=args.seed)
    test_samples = _load_split(args, cfg, "test", args.test_samples, seed_base=args.seed)
    augment = AugmentPolicy() if args.augment else None
    trace, _ = train_loop(model, train_samples, epochs=args.epochs,
                          batch_size=args.batch, seed=seed, base_lr=args.lr,
                          augment=augment)
    miou, pacc = _evaluate_model(model, test_samples)
    return model, trace, miou, pacc


def cmd_train(args):
    cfg = _load_config(args)
    model, trace, miou, pacc = _train_one(cfg, args, args.seed)
    os.makedirs(args.out, exist_ok=True)
    _write_trace(args.out, trace)
    save_checkpoint(os.path.join(args.out, "checkpoint"), model)
    params, macs = count_model(model)
    lat_mean, lat_std = _time_forward(model, generate_sample(args.seed, _scene_spec(cfg)))
    report = RunReport(variant=cfg.variant, params=params, macs=macs,
                       latency_ms_mean=lat_mean, latency_ms_std=lat_std,
                       miou=miou, pixel_acc=pacc, seed=args.seed,
                       config_hash=cfg.config_hash())
    _write_reports(args.out, [report])
    print(f"trained {cfg.variant}: mIoU={miou:.4f} pixel_acc={pacc:.4f}")
    return 0


def cmd_eval(args):
    model = load_checkpoint(args.ckpt)
    cfg = model.cfg
    test_samples = _load_split(args, cfg, "test", args.test_samples, seed_base=args.seed)
    scales = [float(s) for s in args.scales.split(",")] if args.scales else [1.0]
    miou, pacc = _evaluate_model(model, test_samples, scales=scales)
    params, macs = count_model(model)
    report = RunReport(variant=cfg.variant, params=params, macs=macs,
                       latency_ms_mean=0.0, latency_ms_std=0.0,
                       miou=miou, pixel_acc=pacc, seed=args.seed,
                       config_hash=cfg.config_hash())
    _write_reports(args.out, [report])
    print(f"eval {cfg.variant} scales={scales}: mIoU={miou:.4f} pixel_acc={pacc:.4f}")
    return 0


def cmd_ablate(args):
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed]
    reports = []
    for seed in seeds:
        for variant in VARIANTS:
            cfg = _load_config(args, variant=variant)
            params, macs = count_model(SegmentationModel(cfg, seed=seed))
            try:
                model, _, miou, pacc = _train_one(cfg, args, seed)
                lat_mean, lat_std = _time_forward(
                    model, generate_sample(seed, _scene_spec(cfg)))
                reports.append(RunReport(variant=variant, params=params, macs=macs,
                                         latency_ms_mean=lat_mean, latency_ms_std=lat_std,
                                         miou=miou, pixel_acc=pacc, seed=seed,
                                         config_hash=cfg.config_hash()))
            except TrainingDiverged:
                reports.append(RunReport(variant=variant, params=params, macs=macs,
                                         latency_ms_mean=0.0, latency_ms_std=0.0,
                                         miou=0.0, pixel_acc=0.0, seed=seed,
                                         config_hash=cfg.config_hash(), diverged=True))
            print(f"ablate seed={seed} {variant}: done", flush=True)
    _write_reports(args.out, reports)
    return 0


def cmd_bench(args):
    reports = []
    for variant in VARIANTS:  # fixed order, never re-sorted
        cfg = _load_config(args, variant=variant)
        model = SegmentationModel(cfg, seed=args.seed)
        params, macs = count_model(model)
        sample = generate_sample(args.seed, _scene_spec(cfg))
        lat_mean, lat_std = _time_forward(model, sample)
        reports.append(RunReport(variant=variant, params=params, macs=macs,
                                 latency_ms_mean=lat_mean, latency_ms_std=lat_std,
                                 miou=0.0, pixel_acc=0.0, seed=args.seed,
                                 config_hash=cfg.config_hash()))
        fps = 1000.0 / lat_mean
        print(f"bench {variant}: params={params} macs={macs} "
              f"latency={lat_mean:.2f}±{lat_std:.2f}ms fps={fps:.1f}")
    _write_reports(args.out, reports)
    return 0


def _write_pgm(path, arr):
    # arr: (H,W) uint8
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        fh.write(arr.tobytes())


def _write_ppm(path, rgb):
    # rgb: (3,H,W) float in [0,1]
    arr = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        fh.write(arr.tobytes())


def dump_attention(model, sample, out_dir):
    """Write per-stage spatial attention maps as PGM plus sidecar bounds."""
    from .network import encode_rgb, encode_depth

    os.makedirs(out_dir, exist_ok=True)
    rgb_feats = encode_rgb(Tensor(sample.rgb), model)
    depth_feats = encode_depth(Tensor(sample.depth), model)
    sidecar = {}
    for i, (blk, rf, df) in enumerate(zip(model.fusion_blocks, rgb_feats, depth_feats)):
        ws = blk.spatial_attention(rf, df)
        if ws is None:
            continue
        lo, hi = float(ws.min()), float(ws.max())
        if hi - lo < 1e-12:
            img = np.full(ws.shape, 128, dtype=np.uint8)
        else:
            img = np.clip(np.rint((ws - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)
        name = f"spatial_attention_stage{i}.pgm"
        _write_pgm(os.path.join(out_dir, name), img)
        sidecar[name] = {"min": lo, "max": hi, "shape": list(ws.shape)}
    _write_ppm(os.path.join(out_dir, "input_rgb.ppm"), sample.rgb)
    with open(os.path.join(out_dir, "attention_bounds.json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    return sidecar


def cmd_dump_attention(args):
    if args.ckpt:
        model = load_checkpoint(args.ckpt)
    else:
        model = SegmentationModel(_load_config(args), seed=args.seed)
    if model.cfg.variant not in ("lafs", "lafs_cma"):
        print("warning: variant has no spatial attention gate; nothing to dump",
              file=sys.stderr)
    sample = generate_sample(args.seed, _scene_spec(model.cfg))
    sidecar = dump_attention(model, sample, args.out)
    print(f"wrote {len(sidecar)} attention maps to {args.out}")
    return 0


def _add_common(p, with_train=False):
    p.add_argument("--config", help="model config JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--data", help="corpus directory with manifest.txt (default: synthesize)")
    p.add_argument("--test-samples", type=int, default=32)
    if with_train:
        p.add_argument("--variant", choices=VARIANTS)
        p.add_argument("--epochs", type=int, default=3)
        p.add_argument("--batch", type=int, default=8)
        p.add_argument("--lr", type=float, default=5e-5)
        p.add_argument("--train-samples", type=int, default=128)
        p.add_argument("--augment", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="rgbdfusion",
                                     description="toy RGB-D fusion segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one fusion variant")
    _add_common(p, with_train=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scales", help="comma list of multi-scale inference ratios")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score all five fusion variants")
    _add_common(p, with_train=True)
    p.add_argument("--seeds", help="comma list of seeds (default: --seed)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="forward-latency benchmark of all variants")
    _add_common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("dump-attention", help="write spatial attention maps as PGM")
    _add_common(p)
    p.add_argument("--ckpt")
    p.add_argument("--variant", choices=VARIANTS, default="lafs_cma")
    p.set_defaults(func=cmd_dump_attention)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
