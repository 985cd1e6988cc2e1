"""Command-line entry point: train, denoise, eval, bench, gradcheck."""
from __future__ import annotations

import argparse
import gc
import logging
import statistics
import sys
import time
from pathlib import Path

from . import gradcheck
from .io import CheckpointError, ImageFormatError, load_checkpoint, load_folder, load_image, save_checkpoint, save_image
from .metrics import eval_dataset
from .network import ModelConfig, denoise
from .training import TrainConfig, TrainingDiverged, train

log = logging.getLogger("wavedense")


def _ints(s):
    return tuple(int(v) for v in str(s).split(",") if v.strip())


def _bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _lr_pairs(s):
    # "-3:-3,-3.8:-4,-4.5:-5"
    pairs = []
    for part in str(s).split(","):
        a, b = part.split(":")
        pairs.append((float(a), float(b)))
    return tuple(pairs)


MODEL_KEYS = {
    "levels": (int, "number of wavelet levels"),
    "channels": (_ints, "comma-separated channel width per level"),
    "rdb_depth": (int, "conv blocks per residual dense block"),
    "bn_policy": (str, "batch-norm placement: standard | none | all"),
}
TRAIN_KEYS = {
    "sigma": (float, "noise std dev on the 0-255 scale"),
    "patch": (int, "training patch side"),
    "batch": (int, "patches per optimizer step"),
    "stages": (_ints, "epochs per learning-rate stage, e.g. 15,20,10"),
    "lr_log10": (_lr_pairs, "log10 lr endpoints per stage, e.g. -3:-3,-3.8:-4,-4.5:-5"),
    "beta1": (float, "Adam beta1"),
    "beta2": (float, "Adam beta2"),
    "eps": (float, "Adam epsilon"),
    "steps_per_epoch": (int, "optimizer steps per epoch (default: patches available / batch)"),
    "checkpoint_every": (int, "write the checkpoint every N epochs"),
    "augment": (_bool, "dihedral patch augmentation (true/false)"),
}
COMMON_KEYS = {"seed": (int, "random seed")}


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (t.strip() for t in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in MODEL_KEYS and key not in TRAIN_KEYS and key not in COMMON_KEYS:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def _add_keys(parser, keys):
    for key, (_, help_) in keys.items():
        parser.add_argument("--" + key.replace("_", "-"), dest=key, default=None, help=help_)


def _settings(args, keys) -> dict:
    """Merge config file and flags (flags win) for the given key table, parsed to Python values."""
    raw = read_config_file(args.config) if getattr(args, "config", None) else {}
    out = {}
    for key, (conv, _) in keys.items():
        value = getattr(args, key, None)
        if value is None:
            value = raw.get(key)
        if value is not None:
            try:
                out[key] = conv(value)
            except ValueError as e:
                raise ValueError(f"bad value for {key}: {value!r} ({e})") from None
    return out


def model_config(args, required=True) -> ModelConfig | None:
    s = _settings(args, MODEL_KEYS)
    if not s and not required:
        return None
    if "channels" in s and "levels" not in s:
        s["levels"] = len(s["channels"])
    return ModelConfig(**s)


def train_config(args) -> TrainConfig:
    s = _settings(args, TRAIN_KEYS)
    seed = _settings(args, COMMON_KEYS).get("seed")
    if seed is not None:
        s["seed"] = seed
    return TrainConfig(**s)


def _seed(args, default=0) -> int:
    return _settings(args, COMMON_KEYS).get("seed", default)


# ------------------------------------------------------------ commands

def cmd_train(args) -> int:
    mc = model_config(args)
    tc = train_config(args)
    dataset, failures = load_folder(args.dataset)
    for name, why in failures:
        log.warning("skipping %s: %s", name, why)
    if not dataset:
        raise ValueError(f"no readable training images in {args.dataset}")
    validation = load_folder(args.val_dir)[0] if args.val_dir else None
    resume = load_checkpoint(args.resume, expect=mc) if args.resume else None

    def sink(rec):
        print(rec.line(), flush=True)

    for cp in train(mc, tc, dataset, [sink], validation, resume):
        save_checkpoint(args.out, cp)
        print(f"checkpoint epoch={cp.epoch} step={cp.step} -> {args.out}", flush=True)
    return 0


def cmd_denoise(args) -> int:
    cp = load_checkpoint(args.checkpoint)
    img = load_image(args.input).pixels
    save_image(args.output, denoise(img, cp.params))
    return 0


def cmd_eval(args) -> int:
    expect = model_config(args, required=False)
    cp = load_checkpoint(args.checkpoint, expect=expect)
    report = eval_dataset(cp, args.test_dir, args.sigma, _seed(args), report_unclamped=args.unclamped)
    print(report.table())
    if args.report:
        Path(args.report).write_text("\n".join(report.lines()) + "\n")
    return 0


def bench_set(params, images, reps=10, warmup=2):
    """Mean per-image forward time for each repetition, after ``warmup`` untimed passes."""
    for _ in range(warmup):
        for _, img in images:
            denoise(img, params)
    per_rep = []
    # like timeit, keep the collector out of the timed region
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(reps):
            times = []
            for _, img in images:
                t0 = time.perf_counter()
                denoise(img, params)
                times.append(time.perf_counter() - t0)
            per_rep.append(sum(times) / len(times))
    finally:
        if was_enabled:
            gc.enable()
    return per_rep


def cmd_bench(args) -> int:
    if args.reps < 10 or args.warmup < 2:
        raise ValueError("bench needs --reps >= 10 and --warmup >= 2")
    cp = load_checkpoint(args.checkpoint)
    lines = []
    for folder in args.test_dirs:
        images, failures = load_folder(folder)
        if not images:
            raise ValueError(f"no readable images in {folder}")
        per_rep = bench_set(cp.params, images, args.reps, args.warmup)
        mean = statistics.fmean(per_rep)
        cv = statistics.pstdev(per_rep) / mean
        lines.append(f"{Path(folder).name} images={len(images)} reps={args.reps} "
                     f"mean_s={mean:.6f} cv={cv:.4f}")
    print("\n".join(lines))
    if args.report:
        Path(args.report).write_text("\n".join(lines) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    unknown = set(args.suite or ()) - set(gradcheck.SUITES)
    if unknown:
        raise ValueError(f"unknown suites: {sorted(unknown)}; known: {sorted(gradcheck.SUITES)}")
    results = gradcheck.run_all(args.suite, seed=args.seed)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wavedense", description="Wavelet residual dense denoising network")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on a folder of grayscale images")
    t.add_argument("dataset")
    t.add_argument("--out", required=True, help="checkpoint path (rewritten at each checkpoint)")
    t.add_argument("--val-dir", help="held-out images for per-epoch validation PSNR")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--config", help="key=value config file")
    _add_keys(t, {**MODEL_KEYS, **TRAIN_KEYS, **COMMON_KEYS})
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("denoise", help="denoise one image")
    d.add_argument("checkpoint")
    d.add_argument("input")
    d.add_argument("output")
    d.add_argument("--seed", type=int, default=0, help="accepted for uniformity; denoising is deterministic")
    d.set_defaults(func=cmd_denoise)

    e = sub.add_parser("eval", help="PSNR/SSIM on a test folder with synthetic noise")
    e.add_argument("checkpoint")
    e.add_argument("test_dir")
    e.add_argument("--sigma", type=float, required=True)
    e.add_argument("--report", help="write name/psnr/ssim lines here")
    e.add_argument("--unclamped", action="store_true", help="also score outputs before clamping")
    e.add_argument("--config", help="key=value file; model keys must match the checkpoint")
    _add_keys(e, {**MODEL_KEYS, **COMMON_KEYS})
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="mean per-image forward time per test folder")
    b.add_argument("checkpoint")
    b.add_argument("test_dirs", nargs="+")
    b.add_argument("--reps", type=int, default=10)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--report")
    b.add_argument("--seed", type=int, default=0, help="accepted for uniformity; timing uses no randomness")
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("gradcheck", help="finite-difference checks of all backward passes")
    g.add_argument("--suite", action="append", help="run only this suite (repeatable)")
    g.add_argument("--seed", type=int, default=0, help="seed for the random test points")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError, CheckpointError, ImageFormatError, TrainingDiverged) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
