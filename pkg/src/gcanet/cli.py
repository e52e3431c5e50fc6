"""``gcanet`` command line: synth, train, infer, eval, analyze, ablate.

Exit codes: 0 ok, 2 bad flags/arguments, 3 I/O problems (missing files,
unreadable checkpoints), 4 checkpoint config/weights mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .dilation import (
    ChainSyntaxError,
    dependency_sets,
    gcanet_chain,
    gridding_render,
    parse_chain,
    receptive_field,
)
from .metrics import psnr, ssim
from .model import ConfigMismatchError, ModelConfig, dehaze, load_checkpoint, parse_kv_config
from .synth import HAZE_MODES, read_png, write_pair_set, write_png
from .train import TrainConfig, evaluate, run_ablation, train
from .weights import WeightFormatError

EXIT_USAGE, EXIT_IO, EXIT_MISMATCH = 2, 3, 4


class UsageError(Exception):
    pass


def _add_model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--base-channels", type=int, help="feature width (full scale 64, default 16)")
    g.add_argument("--dilations", help="comma separated resblock rates (default 2,2,2,4,4,4,1)")
    g.add_argument("--no-smooth", action="store_true", help="plain dilated resblocks")
    g.add_argument("--no-gate", action="store_true", help="use F_h instead of gated fusion")
    g.add_argument("--norm", choices=("instance", "batch"), help="normalization kind")
    g.add_argument("--no-edge", action="store_true", help="do not feed the edge channel")


def _add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--data", required=True, help="pair set directory")
    g.add_argument("--val", help="held-out pair set (default: 10%% split of --data)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float, help="initial learning rate (default 0.01)")
    g.add_argument("--batch-size", type=int)
    g.add_argument("--crop", type=int, help="training crop size")
    g.add_argument("--seed", type=int)
    g.add_argument("--precision", choices=("float64", "float32"))
    g.add_argument("--checkpoint-every", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gcanet", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", help="key=value file overriding defaults (flags win)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="write synthetic clean/corrupted PNG pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--mode", choices=HAZE_MODES, default="depth_ramp")
    p.add_argument("--rain", action="store_true", help="rain streaks instead of haze")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beta", type=float, help="fixed scattering coefficient")
    p.add_argument("--t0", type=float, help="transmission for constant_t")
    p.add_argument("--start-index", type=int, default=0)

    p = sub.add_parser("train", help="train a model on a pair set")
    _add_train_flags(p)
    _add_model_flags(p)
    p.add_argument("--resume", help="last.gcat checkpoint to continue from")

    p = sub.add_parser("infer", help="restore PNG images with a checkpoint")
    p.add_argument("--in", dest="input", required=True, help="PNG file or directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="PNG file or directory")

    p = sub.add_parser("eval", help="PSNR/SSIM table")
    p.add_argument("--data", help="pair set: scores corrupted (or restored, with --ckpt) vs clean")
    p.add_argument("--ckpt")
    p.add_argument("--pred", help="directory of images to score")
    p.add_argument("--ref", help="directory of reference images (same filenames as --pred)")
    p.add_argument("--csv", help="write the per-image table here")

    p = sub.add_parser("ablate", help="train the four incremental ablation configs")
    _add_train_flags(p)
    _add_model_flags(p)

    p = sub.add_parser("analyze", help="dependency sets / gridding report for a conv chain")
    p.add_argument("--chain", help="e.g. 'd3x2,d3x4'; prefix s for smoothed (sd3x2); pK = plane")
    p.add_argument("--rf", metavar="CHAIN", help="print the receptive field of CHAIN and exit")
    p.add_argument("--dims", type=int, choices=(1, 2), default=1)
    p.add_argument("--extent", type=int, default=64, help="input extent per axis")
    p.add_argument("--indices", help="comma separated output indices (1-D) to report")
    p.add_argument("--no-smooth", action="store_true", help="default chain without smoothing")
    p.add_argument("--json", help="write the report here instead of stdout")
    p.add_argument("--png", help="render before/after gridding panel for --before/--after")
    p.add_argument("--before")
    p.add_argument("--after")
    return ap


def _read_config_file(path) -> str:
    if not path:
        return ""
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc


def resolve_configs(args) -> tuple[ModelConfig, TrainConfig]:
    """defaults <- config file <- flags."""
    text = _read_config_file(args.config)
    mkw = parse_kv_config(text, ModelConfig)
    tkw = parse_kv_config(text, TrainConfig)
    flag_map = {"base_channels": "base_channels", "norm": "norm_kind"}
    for flag, key in flag_map.items():
        if getattr(args, flag, None) is not None:
            mkw[key] = getattr(args, flag)
    if getattr(args, "dilations", None):
        mkw["dilation_schedule"] = tuple(int(v) for v in args.dilations.split(","))
    if getattr(args, "no_smooth", False):
        mkw["use_smoothed_dilation"] = False
    if getattr(args, "no_gate", False):
        mkw["use_gated_fusion"] = False
    if getattr(args, "no_edge", False):
        mkw["use_edge_channel"] = False
    for flag, key in {"epochs": "epochs", "lr": "lr0", "batch_size": "batch_size",
                      "crop": "crop_size", "seed": "seed", "precision": "precision",
                      "checkpoint_every": "checkpoint_every"}.items():
        if getattr(args, flag, None) is not None:
            tkw[key] = getattr(args, flag)
    try:
        return ModelConfig(**mkw), TrainConfig(**tkw)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def write_run_meta(out_dir, args, *configs) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"command={args.command}"]
    lines += [f"arg.{k}={v}" for k, v in sorted(vars(args).items()) if k != "command"]
    for cfg in configs:
        lines += [f"{type(cfg).__name__}.{k}={v}" for k, v in asdict(cfg).items()]
    (out / "run.meta").write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_synth(args) -> int:
    if args.count < 0 or args.size < 16:
        raise UsageError("--count must be >= 0 and --size >= 16")
    mode = "rain" if args.rain else args.mode
    rows = write_pair_set(args.out, args.count, mode, seed=args.seed, size=args.size,
                          start_index=args.start_index, beta=args.beta, t0=args.t0)
    write_run_meta(args.out, args)
    print(f"wrote {len(rows)} pairs to {args.out}")
    return 0


def cmd_train(args) -> int:
    mcfg, tcfg = resolve_configs(args)
    write_run_meta(args.out, args, mcfg, tcfg)
    res = train(mcfg, tcfg, args.data, args.out, val_dir=args.val, resume_from=args.resume)
    last = res.history[-1]
    print(f"epochs={len(res.history)} train_loss={last['train_loss']} "
          f"val_psnr={last['val_psnr']} val_ssim={last['val_ssim']}")
    print(f"checkpoint: {res.best_checkpoint}")
    return 0


def _png_inputs(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
    if not path.exists():
        raise FileNotFoundError(f"input not found: {path}")
    return [path]


def cmd_infer(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    src = Path(args.input)
    inputs = _png_inputs(src)
    out = Path(args.out)
    if src.is_dir():
        out.mkdir(parents=True, exist_ok=True)
        targets = [out / p.name for p in inputs]
        write_run_meta(out, args)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        targets = [out]
    for p, t in zip(inputs, targets):
        write_png(t, dehaze(model, read_png(p)[None])[0])
    print(f"restored {len(inputs)} image(s) -> {args.out}")
    return 0


def _print_table(rows, header):
    print("\t".join(header))
    for r in rows:
        print("\t".join(str(r[h]) for h in header))


def cmd_eval(args) -> int:
    if args.pred and args.ref:
        preds = _png_inputs(Path(args.pred))
        ref_dir = Path(args.ref)
        names, ps, ss = [], [], []
        for p in preds:
            r = ref_dir / p.name
            if not r.exists():
                raise FileNotFoundError(f"no reference for {p.name} in {ref_dir}")
            a, b = read_png(p), read_png(r)
            names.append(p.stem)
            ps.append(psnr(a, b))
            ss.append(ssim(a, b))
    elif args.data:
        model = load_checkpoint(args.ckpt)[0] if args.ckpt else None
        _, after = evaluate(model, args.data)
        names, ps, ss = after.names, after.psnr, after.ssim
    else:
        raise UsageError("eval needs --data or both --pred and --ref")
    header = ["image", "psnr", "ssim"]
    rows = [{"image": n, "psnr": f"{p:.4f}", "ssim": f"{s:.6f}"} for n, p, s in zip(names, ps, ss)]
    rows.append({"image": "mean", "psnr": f"{np.mean(ps):.4f}" if ps else "nan",
                 "ssim": f"{np.mean(ss):.6f}" if ss else "nan"})
    _print_table(rows, header)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
            wr.writeheader()
            wr.writerows(rows)
    return 0


def cmd_ablate(args) -> int:
    mcfg, tcfg = resolve_configs(args)
    write_run_meta(args.out, args, mcfg, tcfg)
    rows = run_ablation(mcfg, tcfg, args.data, args.out, val_dir=args.val)
    _print_table(rows, list(rows[0]))
    return 0


def cmd_analyze(args) -> int:
    try:
        if args.rf:
            print(receptive_field(parse_chain(args.rf, args.dims)))
            return 0
        chain = (parse_chain(args.chain, args.dims) if args.chain
                 else gcanet_chain(smoothed=not args.no_smooth, dims=args.dims))
    except ChainSyntaxError as exc:
        raise UsageError(str(exc)) from exc
    indices = None
    if args.indices:
        if args.dims != 1:
            raise UsageError("--indices is only supported with --dims 1")
        indices = [int(v) for v in args.indices.split(",")]
    try:
        report = dependency_sets(chain, indices, input_extent=args.extent)
    except IndexError as exc:
        raise UsageError(str(exc)) from exc
    text = json.dumps(report.to_json(), indent=2)
    if args.json:
        Path(args.json).write_text(text + "\n", encoding="utf-8")
        print(f"gridding={str(report.gridding).lower()} receptive_field={report.receptive_field}")
    else:
        print(text)
    if args.png:
        if not (args.before and args.after):
            raise UsageError("--png needs --before and --after images")
        gridding_render(read_png(args.before), read_png(args.after), path=args.png)
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "ablate": cmd_ablate, "analyze": cmd_analyze}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"gcanet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigMismatchError as exc:
        print(f"gcanet {args.command}: config/weights mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (OSError, WeightFormatError) as exc:
        print(f"gcanet {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
