"""Command-line entry point.

Exit codes: 0 success, 1 check failure, 2 usage or config error, 3 I/O or
integrity error, 4 numeric abort.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from .errors import SismaError

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4
SCAN_SLOPE_LIMIT = 1.3
MIN_SEPARATION = 0.5


def _echo_config(name, items):
    print(f"[{name}] resolved config")
    for key, value in items:
        print(f"  {key} = {value}")
    sys.stdout.flush()


def _args_items(args):
    return [(k, v) for k, v in sorted(vars(args).items()) if k not in ("func", "command")]


def cmd_make_data(args):
    from .data import PairDataset, make_shapes_dataset, save_pair_folder

    _echo_config("make-data", _args_items(args))
    samples = make_shapes_dataset(args.n, args.size, args.seed)
    save_pair_folder(PairDataset.from_samples(samples), args.out)
    print(f"wrote {len(samples)} image/mask pairs to {args.out}")
    return EXIT_OK


def cmd_train(args):
    from .train import format_config, load_config, run_training

    cfg = load_config(args.config)
    _echo_config("train", [tuple(line.split(" = ", 1)) for line in format_config(cfg).splitlines()]
                 + [("resume", args.resume)])
    echo = None if args.quiet else print
    final = run_training(cfg, resume=args.resume, echo=echo)
    print(final)
    return EXIT_OK


def load_ema_model(path):
    from .checkpoint import load_checkpoint
    from .model import ModelConfig, build_model

    ckpt = load_checkpoint(path)
    config = ModelConfig(**ckpt.config)
    dtype = next(iter(ckpt.ema.values())).dtype
    model = build_model(config, dtype=dtype)
    model.load_state_dict(ckpt.ema)
    model.eval()
    return model, ckpt


def cmd_sample(args):
    from PIL import Image

    from .data import read_mask, to_uint8
    from .model import sample

    _echo_config("sample", _args_items(args))
    model, ckpt = load_ema_model(args.ckpt)
    c = model.config
    paths = [Path(args.mask)] if args.mask else sorted(Path(args.mask_dir).glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no mask PNGs in {args.mask_dir}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    k = args.grid or 1
    seeds = [args.seed + j for j in range(k)]
    for path in paths:
        mask = read_mask(path, c.mask_classes, c.image_size)
        images = sample(model, np.repeat(mask[None], k, axis=0), seeds, steps=args.steps)
        for seed, image in zip(seeds, images.numpy()):
            target = out / f"{path.stem}_seed{seed}.png"
            Image.fromarray(to_uint8(image), mode="RGB").save(target)
            print(target)
    return EXIT_OK


def cmd_bench(args):
    from .evaluation import WORKLOADS, scan_scaling_bench

    _echo_config("bench", _args_items(args))
    reports = {}
    for name in args.workload:
        reports[name] = scan_scaling_bench(WORKLOADS[name], args.lengths, trials=args.trials, name=name)
        print(reports[name].table())
        for line in reports[name].records():
            print(line)
    failures = []
    for name, rep in reports.items():
        if name.endswith("_scan") and rep.slope > args.max_slope:
            failures.append(f"{name} slope {rep.slope:.3f} exceeds {args.max_slope}")
    if "prefix_sum" in reports and "pairwise" in reports:
        gap = reports["pairwise"].slope - reports["prefix_sum"].slope
        print(f"calibration separation {gap:.3f} slope units")
        if gap < MIN_SEPARATION:
            failures.append(f"calibration workloads separated by only {gap:.3f} < {MIN_SEPARATION}")
    for f in failures:
        print(f"FAIL: {f}")
    return EXIT_CHECK if failures else EXIT_OK


def cmd_gradcheck(args):
    from .evaluation import gradcheck_suite, parameter_groups
    from .model import build_model, preset

    _echo_config("gradcheck", _args_items(args))
    config = preset(args.preset)
    fault = args.fault_inject
    if fault == "":
        fault = next(iter(parameter_groups(build_model(config))))
    report = gradcheck_suite(config, seed=args.seed, coords=args.coords, fault_group=fault)
    print(report.table())
    if not report.passed:
        print("FAIL: " + ", ".join(report.failing()))
        return EXIT_CHECK
    return EXIT_OK


def cmd_inspect_ckpt(args):
    from .checkpoint import load_checkpoint

    _echo_config("inspect-ckpt", _args_items(args))
    ckpt = load_checkpoint(args.ckpt)
    print(f"version      {ckpt.version}")
    print(f"step         {ckpt.step}")
    print(f"fingerprint  {ckpt.fingerprint}")
    for group, entries in (("model", ckpt.model), ("ema", ckpt.ema), ("optim", ckpt.optimizer)):
        for name, t in entries.items():
            print(f"{group}/{name:<48} {str(t.dtype).replace('torch.', ''):<8} {tuple(t.shape)}")
    total = sum(t.numel() for t in ckpt.model.values())
    print(f"params       {total:,d}")
    return EXIT_OK


def cmd_evaluate(args):
    from dataclasses import fields

    from .evaluation import end_to_end_report
    from .train import TrainConfig, held_out_shapes

    _echo_config("evaluate", _args_items(args))
    model, ckpt = load_ema_model(args.ckpt)
    known = {f.name for f in fields(TrainConfig)}
    train = {k: tuple(v) if isinstance(v, list) else v for k, v in ckpt.meta.get("train", {}).items() if k in known}
    cfg = TrainConfig(**train)
    masks = held_out_shapes(cfg, args.masks)
    report = end_to_end_report(model, masks, seeds_per_mask=args.seeds, steps=args.steps,
                               diversity_threshold=args.min_diversity)
    print(f"step={ckpt.step} fingerprint={ckpt.fingerprint} {report.summary()}")
    failures = []
    if report.mean_iou < args.min_iou:
        failures.append(f"mean IoU {report.mean_iou:.4f} < {args.min_iou}")
    if report.diverse_fraction < args.min_diverse_fraction:
        failures.append(f"diverse fraction {report.diverse_fraction:.3f} < {args.min_diverse_fraction}")
    for f in failures:
        print(f"FAIL: {f}")
    return EXIT_CHECK if failures else EXIT_OK


def build_parser():
    from .evaluation import WORKLOADS

    parser = argparse.ArgumentParser(prog="sisma", description="Mask-conditioned Mamba flow-matching toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="write the synthetic shapes dataset as image/mask PNG folders")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", help="train from a key = value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--resume")
    p.add_argument("--quiet", action="store_true", help="do not echo per-step log records")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample images for masks with the EMA weights of a checkpoint")
    p.add_argument("--ckpt", required=True)
    masks = p.add_mutually_exclusive_group(required=True)
    masks.add_argument("--mask")
    masks.add_argument("--mask-dir")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=int, default=None, help="samples per mask, seeds seed..seed+k-1")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("bench", help="scan scaling benchmark with calibration workloads")
    p.add_argument("--workload", nargs="+", choices=sorted(WORKLOADS),
                   default=["prefix_sum", "pairwise", "chunked_scan", "kernel_scan"])
    p.add_argument("--lengths", type=int, nargs="+", default=[512, 1024, 2048, 4096, 8192])
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--max-slope", type=float, default=SCAN_SLOPE_LIMIT)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check of the full model at 64-bit")
    p.add_argument("--preset", default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=32)
    p.add_argument("--fault-inject", nargs="?", const="", default=None, metavar="GROUP",
                   help="scale one group's analytic gradient by 1.01 (default: the first group)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("evaluate", help="mask adherence and diversity on held-out shapes masks")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--masks", type=int, default=64)
    p.add_argument("--seeds", type=int, default=8)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--min-iou", type=float, default=0.70)
    p.add_argument("--min-diversity", type=float, default=0.05)
    p.add_argument("--min-diverse-fraction", type=float, default=0.8)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect-ckpt", help="print a checkpoint's header, entries and parameter count")
    p.add_argument("ckpt")
    p.set_defaults(func=cmd_inspect_ckpt)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "steps", 1) < 1 or (getattr(args, "grid", None) or 1) < 1:
        parser.error("--steps and --grid must be >= 1")
    try:
        return args.func(args)
    except SismaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        path = getattr(exc, "diagnostics_path", None)
        if path:
            print(f"diagnostics: {path}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
