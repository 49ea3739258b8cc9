"""Command-line entry point: ``codeprior-sr <subcommand> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("codeprior_sr")

DONE = "DONE"
SNAPSHOT = "run_config.json"
TABLE_VARIANTS = ("baseline", "uncertainty", "top3", "aa", "full")
ALL_VARIANTS = ("baseline", "uncertainty", "top3", "top5", "aa", "full")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config


def load_config(path) -> dict:
    """JSON config with optional ``data``, ``train`` and ``bench`` sections."""
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file {p} not found")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {p} is not valid JSON: {e}") from None
    unknown = set(cfg) - {"data", "train", "bench"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def effective_config(args) -> dict:
    cfg = load_config(args.config)
    data = dict(cfg.get("data", {}))
    train = dict(cfg.get("train", {}))
    net = dict(train.get("net", {}))
    bench = dict(cfg.get("bench", {}))
    if args.seed is not None:
        data["seed"] = args.seed
        train["seed"] = args.seed
        bench["seed"] = args.seed
    if args.scale is not None:
        data["scale"] = args.scale
        net["scale"] = args.scale
    if getattr(args, "steps", None) is not None:
        key = {
            "pretrain-codebook": "pretrain_steps",
            "train-stage1": "stage1_steps",
            "train-stage2": "stage2_steps",
            "ablate": "stage2_steps",
        }.get(args.command)
        if key:
            train[key] = args.steps
    if net:
        train["net"] = net
    return {"data": data, "train": train, "bench": bench}


def _train_config(eff: dict):
    from .training import TrainConfig

    try:
        return TrainConfig.from_dict(eff["train"])
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad train config: {e}") from None


# ---------------------------------------------------------------------------
# run directory handling


def prepare_out(out: Path, overwrite: bool, must_be_empty: bool = False) -> Path:
    if out.exists():
        busy = (out / DONE).exists() or (must_be_empty and any(out.iterdir()))
        if busy and not overwrite:
            raise FileExistsError(f"{out} already holds a completed run; pass --overwrite to replace it")
        if (out / DONE).exists():
            (out / DONE).unlink()
    out.mkdir(parents=True, exist_ok=True)
    return out


def snapshot(out: Path, args, eff: dict) -> None:
    flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    (out / SNAPSHOT).write_text(json.dumps({"argv": flags, "config": eff}, indent=2, sort_keys=True) + "\n")


def attach_log(out: Path) -> logging.Handler:
    h = logging.FileHandler(out / "run.log", mode="w")
    h.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("codeprior_sr").addHandler(h)
    return h


def _need(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"{args.command} requires {' '.join(missing)}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_data(args, eff, out):
    from .degradation import DatasetConfig, build_toy_dataset

    try:
        cfg = DatasetConfig(**{**eff["data"], **({"n": args.n} if args.n else {})})
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad data config: {e}") from None
    build_toy_dataset(cfg, out, overwrite=True)
    n_train, n_val = cfg.split_counts()
    print(f"wrote {n_train} train / {n_val} val pairs to {out}")


def _dataset(args):
    from .degradation import ToyDataset

    _need(args, "data")
    return ToyDataset.load(args.data)


def cmd_pretrain(args, eff, out):
    from .training import pretrain_codebook

    cfg = _train_config(eff)
    _, _, m = pretrain_codebook(_dataset(args), cfg, out, overwrite=True)
    print(f"val_mse={m['val_mse']:.6f} codes_used={m['codes_used']} ({100 * m['usage_fraction']:.1f}%)")


def cmd_stage1(args, eff, out):
    from .training import train_stage1

    _need(args, "checkpoint")
    cfg = _train_config(eff)
    _, _, m = train_stage1(_dataset(args), args.checkpoint, cfg, out, overwrite=True)
    print(f"val total {m['initial']['total']:.5f} -> {m['final']['total']:.5f}")


def cmd_stage2(args, eff, out):
    from .training import train_stage2

    _need(args, "checkpoint")
    cfg = _train_config(eff)
    if args.variant:
        cfg = cfg.with_variant(args.variant[0])
    _, _, m = train_stage2(_dataset(args), args.checkpoint, cfg, out, overwrite=True)
    print(f"val psnr {m['val_psnr']:.3f} dB (bicubic {m['bicubic_psnr']:.3f} dB)")


def cmd_ablate(args, eff, out):
    from .training import run_ablation

    _need(args, "checkpoint")
    cfg = _train_config(eff)
    ds = _dataset(args)
    rows = []
    for v in args.variant or TABLE_VARIANTS:
        _, _, m = run_ablation(ds, args.checkpoint, cfg, v, out / v, overwrite=True)
        rows.append((v, m["val_psnr"], m["val_ssim"], m["bicubic_psnr"], m["bicubic_ssim"]))
        print(f"{v}: psnr {m['val_psnr']:.3f} dB ssim {m['val_ssim']:.4f}")
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "psnr_db", "ssim", "bicubic_psnr_db", "bicubic_ssim"])
        for r in rows:
            w.writerow([r[0]] + [f"{x:.6f}" for x in r[1:]])


def _read_image(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path).astype(np.float32)
    from PIL import Image

    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def cmd_infer(args, eff, out):
    from .degradation import to_png
    from .training import load_model, super_resolve

    _need(args, "checkpoint", "input")
    src = Path(args.input)
    files = sorted(p for p in src.iterdir() if p.suffix in (".png", ".npy")) if src.is_dir() else [src]
    if not files:
        raise FileNotFoundError(f"no .png/.npy inputs under {src}")
    model = load_model(args.checkpoint)
    for f in files:
        sr = super_resolve(model, _read_image(f)[None])[0]
        np.save(out / f"{f.stem}_sr.npy", sr.astype(np.float32))
        to_png(sr, out / f"{f.stem}_sr.png")
    print(f"super-resolved {len(files)} image(s) into {out}")


def cmd_evaluate(args, eff, out):
    from .metrics import evaluate

    _need(args, "checkpoint", "data")
    rep = evaluate(args.checkpoint, args.data, args.split, out / "metrics.csv")
    print(f"{len(rep.rows)} images: psnr {rep.mean_psnr:.3f} dB ssim {rep.mean_ssim:.4f}")


def cmd_hit_rate(args, eff, out):
    from .codebook import write_hit_rate_csv
    from .plotting import plot_hit_rates
    from .training import model_hit_rates

    _need(args, "checkpoint")
    reps = model_hit_rates(args.checkpoint, _dataset(args), args.k or [1, 3, 5], args.split)
    write_hit_rate_csv(reps, out / "hit_rate.csv")
    plot_hit_rates(reps, out / "hit_rate.png")
    for r in reps:
        print(f"k={r.k}: {100 * r.rate:.2f}% of {r.total} cells")


def cmd_bench(args, eff, out):
    from .codebook import bench_matching, write_bench_csv
    from .plotting import plot_bench

    kw = dict(eff["bench"])
    if args.k:
        kw["k"] = args.k[0]
    if args.sizes:
        kw["codebook_sizes"] = tuple(args.sizes)
    rows = bench_matching(**kw)
    write_bench_csv(rows, out / "bench.csv")
    plot_bench(rows, out / "bench.png")
    for name in dict.fromkeys(r.matcher for r in rows):
        print(f"{name}: log-log slope {next(r.slope for r in rows if r.matcher == name):.3f}")


def cmd_plot(args, eff, out):
    from .codebook import HitRateReport, read_bench_csv
    from .plotting import plot_bench, plot_hit_rates

    _need(args, "from_csv")
    src = Path(args.from_csv)
    if not src.exists():
        raise FileNotFoundError(f"{src} not found")
    with open(src, newline="") as fh:
        header = next(csv.reader(fh), [])
    target = out / f"{src.stem}.png"
    if target.exists() and not args.overwrite:
        raise FileExistsError(f"{target} exists; pass --overwrite to replace it")
    if header[:2] == ["matcher", "K"]:
        plot_bench(read_bench_csv(src), target)
    elif header[:1] == ["k"]:
        with open(src, newline="") as fh:
            reps = [HitRateReport(int(r["k"]), int(r["hits"]), int(r["total"])) for r in csv.DictReader(fh)]
        plot_hit_rates(reps, target)
    else:
        raise ValueError(f"{src}: unrecognised CSV header {header}")
    print(f"wrote {target}")


COMMANDS = {
    "make-data": cmd_make_data,
    "pretrain-codebook": cmd_pretrain,
    "train-stage1": cmd_stage1,
    "train-stage2": cmd_stage2,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "hit-rate": cmd_hit_rate,
    "bench-matching": cmd_bench,
    "plot": cmd_plot,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config with data/train/bench sections")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--scale", type=int, choices=(2, 4))
    common.add_argument("--k", type=int, nargs="+", metavar="N")
    common.add_argument("--variant", nargs="+", choices=ALL_VARIANTS)
    common.add_argument("--overwrite", action="store_true")
    common.add_argument("--data", type=Path, help="toy dataset directory")
    common.add_argument("--checkpoint", type=Path)
    common.add_argument("--steps", type=int, help="step budget of the phase being run")
    common.add_argument("--split", default="val", choices=("train", "val"))

    p = argparse.ArgumentParser(prog="codeprior-sr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    helps = {
        "make-data": "build the procedural HR/LR toy dataset",
        "pretrain-codebook": "train the VQ autoencoder and its codebook",
        "train-stage1": "LQ encoder + uncertainty branch on a frozen codebook/decoder",
        "train-stage2": "top-k matching + Align-Attention guided by stage-1 uncertainty",
        "infer": "super-resolve .png/.npy inputs",
        "evaluate": "Y-channel PSNR/SSIM of a checkpoint on a dataset split",
        "hit-rate": "top-k hit rates of a trained model",
        "bench-matching": "time top-k vs global-attention matching over K",
        "plot": "render a figure from a bench or hit-rate CSV",
        "ablate": "stage-2 ablation variants from one stage-1 checkpoint",
    }
    for name, fn in COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=helps[name])
        sp.set_defaults(func=fn)
        if name == "make-data":
            sp.add_argument("--n", type=int, help="number of image pairs")
        if name == "infer":
            sp.add_argument("--input", type=Path, help="image file or directory")
        if name == "plot":
            sp.add_argument("--from", dest="from_csv", type=Path, help="CSV written by bench-matching or hit-rate")
        if name == "bench-matching":
            sp.add_argument("--sizes", type=int, nargs="+", help="codebook sizes K")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    handler = None
    try:
        eff = effective_config(args)
        if args.variant and len(args.variant) > 1 and args.command != "ablate":
            raise UsageError(f"{args.command} takes a single --variant")
        out = prepare_out(args.out, args.overwrite, must_be_empty=args.command == "make-data")
        snapshot(out, args, eff)
        handler = attach_log(out)
        args.func(args, eff, out)
        if args.command != "plot":
            (out / DONE).write_text("")
        return 0
    except UsageError as e:
        print(f"{parser.prog} {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - one-line diagnostic is the contract
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    finally:
        if handler is not None:
            logging.getLogger("codeprior_sr").removeHandler(handler)
            handler.close()


if __name__ == "__main__":
    sys.exit(main())
