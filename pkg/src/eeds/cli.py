"""Command-line entry point: ``eeds prepare | train | infer | eval | gradcheck``."""

from __future__ import annotations

import argparse
import logging
import os
import random
import sys
from dataclasses import dataclass, fields
from pathlib import Path

SCALES = (2, 3, 4)
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

log = logging.getLogger("eeds")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """Settings shared by the commands; every field may appear in a config file."""

    variant: str = "EEDS"
    scale: int = 3
    patch: int = 96
    count: int = 20000
    holdout: int = 200
    shave: int = -1  # -1 = use the scale
    crop_excess: bool = False


def parse_config_text(text: str, source: str = "config") -> dict[str, str]:
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{source}:{n}: expected 'key = value', got {raw!r}")
        values[key.strip()] = val.strip()
    return values


def _cast(tp, value: str):
    tp = tp if isinstance(tp, str) else tp.__name__
    if tp == "bool":
        if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise UsageError(f"not a boolean: {value!r}")
        return value.lower() in ("true", "1", "yes")
    try:
        return {"int": int, "float": float, "str": str}[tp](value)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def load_settings(path: str | None):
    """Split a key=value file into ``(RunConfig, TrainConfig)``; unknown keys fail."""
    from .train import TrainConfig

    values = parse_config_text(Path(path).read_text(), path) if path else {}
    run_f = {f.name: f.type for f in fields(RunConfig)}
    train_f = {f.name: f.type for f in fields(TrainConfig)}
    unknown = sorted(set(values) - set(run_f) - set(train_f))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    run = RunConfig(**{k: _cast(run_f[k], v) for k, v in values.items() if k in run_f})
    try:
        train = TrainConfig(**{k: _cast(train_f[k], v) for k, v in values.items() if k in train_f})
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return run, train


def _scale(value: str) -> int:
    s = int(value)
    if s not in SCALES:
        raise argparse.ArgumentTypeError(f"unsupported scale {s} (supported: 2, 3, 4)")
    return s


# --------------------------------------------------------------------------
# commands


def cmd_prepare(args, seed: int) -> int:
    import numpy as np

    from .images import augment_all, list_images, load_luminance, make_dataset, split_holdout, stack_pairs

    run, _ = load_settings(args.config)
    scale = args.scale or run.scale
    patch = args.patch or run.patch
    hr_dir = Path(args.hr_dir)
    if not hr_dir.is_dir():
        raise UsageError(f"missing directory {hr_dir}")
    paths = list_images(hr_dir)
    images, skipped = [], 0
    for p in paths:
        img = load_luminance(p)
        if min(img.shape) < patch:
            skipped += 1
            continue
        images.append(img)
    if skipped:
        print(f"warning: skipped {skipped} image(s) smaller than {patch}x{patch}", file=sys.stderr)
    if not images:
        raise UsageError(f"no usable images in {hr_dir}")
    augmented = augment_all(images)
    holdout = run.holdout if run.holdout < len(augmented) // 2 else len(augmented) // 4
    train_imgs, val_imgs = split_holdout(augmented, holdout, seed)
    count = args.count or run.count
    train = make_dataset(train_imgs, scale, patch, count, seed=seed, augment=False)
    n_val = max(1, round(count * len(val_imgs) / len(augmented)))
    val = make_dataset(val_imgs, scale, patch, n_val, seed=seed + 1, augment=False) if val_imgs else []
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, pairs in (("train", train), ("val", val)):
        if pairs:
            lr, hr = stack_pairs(pairs)
            np.savez(out / f"{name}.npz", lr=lr, hr=hr, scale=np.int64(scale))
    counts = {
        "source": hr_dir, "inputs": len(paths), "skipped": skipped, "images": len(images),
        "augmented": len(augmented), "holdout_images": len(val_imgs), "scale": scale,
        "patch": patch, "train_pairs": len(train), "val_pairs": len(val), "seed": seed,
    }
    lines = [f"# {k} = {v}" for k, v in counts.items()] + [str(p) for p in paths]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    print(f"{len(images)} images -> {len(augmented)} augmented "
          f"({len(val_imgs)} held out); {len(train)} train / {len(val)} val pairs at x{scale}")
    return 0


def _load_archive(path, scale):
    import numpy as np

    from .images import SamplePair

    with np.load(path) as z:
        if int(z["scale"]) != scale:
            raise UsageError(f"{path} holds x{int(z['scale'])} pairs, not x{scale}")
        return [SamplePair(l[0], h[0], scale) for l, h in zip(z["lr"], z["hr"])]


def cmd_train(args, seed: int) -> int:
    from .models import build_model
    from .train import TrainingDiverged, init_params, load_checkpoint, prepare_data, save_checkpoint, train

    run, tcfg = load_settings(args.config)
    variant = args.variant or run.variant
    scale = args.scale or run.scale
    if args.epochs is not None:
        tcfg.max_epochs = args.epochs
    if args.max_steps is not None:
        tcfg.max_steps = args.max_steps
    tcfg.seed = seed
    model = build_model(variant, scale, crop_excess=run.crop_excess)
    print(f"settings: variant={variant} scale={scale} " +
          " ".join(f"{f.name}={getattr(tcfg, f.name)}" for f in fields(tcfg)))
    print(f"model: {model.kind} x{scale}, {model.num_params} parameters, " +
          ", ".join(f"{g.name} {g.trainable_layers} layers" for g in model.graphs))
    data = Path(args.data)
    train_set = prepare_data(model, _load_archive(data / "train.npz", scale))
    val_path = data / "val.npz"
    val_set = prepare_data(model, _load_archive(val_path, scale)) if val_path.exists() else None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state, start_epoch, start_step, lr, history = None, 0, 0, None, []
    if args.resume:
        ckpt = load_checkpoint(args.resume, expect_kind=variant, expect_scale=scale)
        state = ckpt.restore(model)
        start_epoch, start_step, lr, history = ckpt.epoch, ckpt.step, ckpt.lr, ckpt.val_history
        print(f"resumed from {args.resume} at epoch {start_epoch}")
    else:
        init_params(model, seed=seed)

    def on_epoch(rec, _model):
        print(f"epoch {rec.epoch:4d}  step {rec.step:7d}  lr {rec.lr:.3g}  "
              f"train {rec.train_loss:.6g}  val {rec.val_loss:.6g}", flush=True)

    try:
        res = train(model, train_set, val_set, tcfg, state=state, on_epoch=on_epoch,
                    start_epoch=start_epoch, start_step=start_step, lr=lr, val_history=history)
    except TrainingDiverged as exc:
        if exc.last_good is not None:
            save_checkpoint(exc.last_good, out / "last_good.eeds")
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3
    save_checkpoint(res.final, out / "final.eeds")
    save_checkpoint(res.best, out / "best.eeds")
    res.write_log(out / "train_log.csv")
    print(f"wrote {out / 'best.eeds'} and {out / 'train_log.csv'}")
    return 0


def cmd_infer(args, seed: int) -> int:
    import numpy as np

    from .images import ImagePlane, bicubic_resize, load_png, rgb_to_ycbcr, save_png, ycbcr_to_rgb
    from .models import infer
    from .train import load_checkpoint

    model = load_checkpoint(args.ckpt).to_model()
    planes = load_png(args.input)
    if len(planes) == 1:
        y = infer(ImagePlane(planes[0]), model).values
        save_png([y], args.output)
    else:
        yy, cb, cr = rgb_to_ycbcr(*planes)
        y = infer(ImagePlane(yy), model).values
        cb, cr = (bicubic_resize(c, scale=model.scale) for c in (cb, cr))
        rgb = ycbcr_to_rgb(y, cb, cr)
        save_png([np.clip(c, 0, 255) for c in rgb], args.output)
    print(f"{planes[0].shape[1]}x{planes[0].shape[0]} -> {y.shape[1]}x{y.shape[0]}: {args.output}")
    return 0


def cmd_eval(args, seed: int) -> int:
    from .metrics import run_benchmark, write_report
    from .train import load_checkpoint

    if args.method == "bicubic":
        model = None
    elif args.ckpt:
        model = load_checkpoint(args.ckpt, expect_scale=args.scale).to_model()
    else:
        raise UsageError("eval needs --ckpt or --method bicubic")
    report = run_benchmark(model, args.test_dir, args.scale, args.shave)
    print(report.table())
    if args.out:
        csv_path, _ = write_report(report, args.out)
        print(f"wrote {csv_path}")
    return 0


def cmd_gradcheck(args, seed: int) -> int:
    from .gradcheck import OP_CHECKS, format_reports, timed_checks

    if not args.full and not args.op:
        raise UsageError("gradcheck needs --op NAME or --full")
    for name in args.op or []:
        if name not in OP_CHECKS:
            raise UsageError(f"unknown op {name!r}; choose from {', '.join(OP_CHECKS)}")
    reports, secs = timed_checks(names=args.op, full=args.full, seed=seed)
    print(format_reports(reports, secs))
    return 0 if all(r.passed for r in reports) else 1


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="seed for all randomness (random and printed if absent)")
    common.add_argument("--threads", type=int, help="cap on BLAS/worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="eeds", description="Deep+shallow super-resolution networks")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", parents=[common], help="build training and validation patch archives")
    s.add_argument("--hr-dir", required=True)
    s.add_argument("--scale", type=_scale)
    s.add_argument("--out", required=True)
    s.add_argument("--patch", type=int)
    s.add_argument("--count", type=int, help="number of training patches")
    s.add_argument("--config")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", parents=[common], help="train a variant on prepared archives")
    s.add_argument("--config")
    s.add_argument("--variant")
    s.add_argument("--scale", type=_scale)
    s.add_argument("--data", required=True, help="directory written by 'prepare'")
    s.add_argument("--out", required=True)
    s.add_argument("--resume")
    s.add_argument("--epochs", type=int)
    s.add_argument("--max-steps", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", parents=[common], help="super-resolve one PNG")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", parents=[common], help="PSNR/SSIM over a test directory")
    s.add_argument("--ckpt")
    s.add_argument("--method", choices=["model", "bicubic"], default="model")
    s.add_argument("--test-dir", required=True)
    s.add_argument("--scale", type=_scale, required=True)
    s.add_argument("--shave", type=int, help="border pixels ignored (default: the scale)")
    s.add_argument("--out", help="directory for the CSV and text reports")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    s.add_argument("--op", action="append", help="op to check (repeatable)")
    s.add_argument("--full", action="store_true", help="every op plus whole-model checks")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 2
        for var in THREAD_VARS:
            os.environ[var] = str(args.threads)
        if "numpy" in sys.modules:
            log.warning("numpy already loaded; --threads may not take effect")
    seed = args.seed
    if seed is None:
        seed = random.SystemRandom().randrange(2**31)
        print(f"seed: {seed}")
    try:
        return args.func(args, seed)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
