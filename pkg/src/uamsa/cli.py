"""Command-line entry point: ``uamsa {synth,train,eval,predict,flops}``.

Exit codes: 0 success, 2 configuration error, 3 data/format error,
4 numerical abort.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .config import RunConfig, load_config
from .errors import ConfigError, FormatError, NumericalError, ParameterError
from .loss import mc_predict
from .metrics import binarize, evaluate_mask, summarize
from .model import build, conv_only_flops, count_params_flops
from .rng import Rng
from .tensor import Tensor
from .train import fit, split_dataset

log = logging.getLogger("uamsa")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MODEL_STREAM = 0xB0B
EVAL_STREAM = 0xE7A1


@contextlib.contextmanager
def _single_thread(enabled: bool):
    if not enabled:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - optional
        yield
        return
    with threadpool_limits(limits=1):
        yield


@contextlib.contextmanager
def _dir_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"{out_dir} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _overrides(args, *names) -> dict:
    out = {}
    for n in names:
        v = getattr(args, n, None)
        if v is not None:
            out[n] = v
    for item in getattr(args, "set", None) or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = val.strip()
    return out


def _config(args, *names) -> RunConfig:
    return load_config(args.config, _overrides(args, *names), preset=args.preset)


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = Path(args.out_dir)
    with _dir_lock(out):
        records = D.generate_synthetic(cfg.synth_config())
        D.write_dataset(out, records)
        cfg.out_dir = str(out)
        cfg.write(out / "config.txt")
    print(f"wrote {len(records)} samples to {out}")
    return EXIT_OK


def _load_records(cfg: RunConfig, data_dir):
    report = D.import_slices(data_dir, size=cfg.image_size, modality=cfg.modality)
    if report.skipped:
        print(f"skipped {len(report.skipped)} file(s)", file=sys.stderr)
    return report.records


def cmd_train(args) -> int:
    cfg = _config(args, "variant", "seed")
    cfg.data_dir, cfg.out_dir = str(args.data_dir), str(args.out_dir)
    out = Path(args.out_dir)
    with _dir_lock(out), _single_thread(cfg.strict):
        cfg.write(out / "config.txt")
        records = _load_records(cfg, args.data_dir)
        splits = split_dataset(records, seed=cfg.seed)
        with open(out / "split.txt", "w") as f:
            for name in ("train", "val", "test"):
                for r in splits[name]:
                    f.write(f"{name} {r.id}\n")
        model = build(cfg.model_spec(), Rng(cfg.seed, MODEL_STREAM))
        res = fit(model, splits, cfg.train_config(), out_dir=out)
        D.save_checkpoint(out / "final.ckpt", res.final_model)
    print(f"best epoch {res.best_epoch} val_dice {res.best_val_dice:.4f}; checkpoint {out / 'best.ckpt'}")
    return EXIT_OK


def _checkpoint_config(args) -> RunConfig:
    path = args.config
    if path is None:
        echo = Path(args.checkpoint).parent / "config.txt"
        path = str(echo) if echo.exists() else None
    return load_config(path, _overrides(args, "seed"), preset=args.preset)


def cmd_eval(args) -> int:
    cfg = _checkpoint_config(args)
    model = D.load_checkpoint(args.checkpoint)
    records = _load_records(cfg, args.data_dir)
    if args.split != "all":
        records = split_dataset(records, seed=cfg.seed)[args.split]
    t_passes = args.t_passes or cfg.eval_t_passes or cfg.t_passes
    rng = Rng(cfg.seed, EVAL_STREAM)
    rows = []
    with _single_thread(cfg.strict):
        for i, r in enumerate(records):
            pred = mc_predict(model, Tensor(r.image[None]), t_passes, rng.child(i))
            rows.append(evaluate_mask(r.id, binarize(pred.mean[0, 0]), r.mask[0], pred.variance))
    out_csv = Path(args.out_csv) if args.out_csv else Path(args.checkpoint).parent / f"metrics_{args.split}.csv"
    D.write_metrics_csv(out_csv, rows)
    summary = summarize(rows)
    print(f"split={args.split} samples={len(rows)} t_passes={t_passes} csv={out_csv}")
    for name, s in summary.items():
        print(f"{name:8s} mean={s['mean']:.4f} median={s['median']:.4f} q1={s['q1']:.4f} q3={s['q3']:.4f}")
    print(f"{'uncert':8s} mean={np.mean([r.mean_uncertainty for r in rows]):.6f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _checkpoint_config(args)
    model = D.load_checkpoint(args.checkpoint)
    img = D.read_pgm(args.image)
    if args.size:
        img = np.clip(D.resize(img, args.size, args.size, "bilinear"), 0, 1)
    try:
        model.spec.check_input(*img.shape)
    except Exception as exc:
        raise FormatError(f"{args.image}: {exc}; pass --size to resize") from None
    t_passes = args.t_passes or cfg.eval_t_passes or cfg.t_passes
    with _single_thread(cfg.strict):
        pred = mc_predict(model, Tensor(img[None, None]), t_passes, Rng(cfg.seed, EVAL_STREAM))
    prefix = args.out_prefix
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    mean = np.clip(pred.mean[0, 0], 0, 1)
    D.write_pgm(f"{prefix}_mean.pgm", mean)
    D.write_pgm(f"{prefix}_mask.pgm", binarize(mean).astype(np.float32))
    D.write_floatmap(f"{prefix}_uncertainty.uamf", pred.variance[0, 0])
    print(f"wrote {prefix}_mean.pgm {prefix}_mask.pgm {prefix}_uncertainty.uamf (T={t_passes})")
    return EXIT_OK


def cmd_flops(args) -> int:
    cfg = _config(args, "variant")
    spec = cfg.model_spec()
    size = args.size or cfg.image_size
    r = count_params_flops(spec, size, size)
    print(f"variant     {spec.variant}")
    print(f"input       {spec.in_channels}x{size}x{size}")
    print(f"depth       {spec.depth}")
    print(f"base        {spec.base_channels}")
    print(f"params      {r['params']}")
    print(f"flops       {r['flops']}")
    print(f"gflops      {r['flops'] / 1e9:.4f}")
    print(f"conv_flops  {conv_only_flops(spec, size, size)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uamsa", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="key = value config file")
        sp.add_argument("--preset", default="desk", choices=("desk", "paper"))
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    s = sub.add_parser("synth", help="write a synthetic dataset")
    common(s)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model")
    common(s)
    s.add_argument("--data-dir", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--variant", choices=("uamsa", "plain_unet"))
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="MC-dropout evaluation with per-image metrics")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data-dir", required=True)
    s.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    s.add_argument("--t-passes", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out-csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="mean/threshold masks and uncertainty map for one image")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--t-passes", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--size", type=int, help="resize the image to SIZE x SIZE first")
    s.add_argument("--out-prefix", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("flops", help="parameter and FLOP counts")
    common(s)
    s.add_argument("--variant", choices=("uamsa", "plain_unet"))
    s.add_argument("--size", type=int)
    s.set_defaults(func=cmd_flops)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ParameterError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
