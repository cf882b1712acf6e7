"""Command-line entry point.

Exit codes: 0 success, 2 usage/configuration error, 3 input/output error,
4 numerical failure.

``--config`` reads a JSON file with optional ``model``, ``train`` and
``synth`` sections. Values from the file replace the built-in defaults;
flags given explicitly on the command line win over the file.
"""
from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from .data import SynthSpec, load_dataset, synth_dataset, write_synth_dataset, _read_gray, standardize
from .errors import CheckpointError, DimensionError, InputError, TrainingError
from .lca import PAIRINGS, LcaParams, hyperparameter_grid, local_contrast_attention
from .metrics import EvalReport, default_thresholds, format_roc, roc
from .model import LcaeNet, ModelConfig, count_flops, count_params
from .train import (TrainConfig, evaluate_model, load_model, predict_probs, train_loop)

log = logging.getLogger("lcaenet")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# helpers ----------------------------------------------------------------------

def _csv(kind):
    def parse(text: str):
        try:
            vals = [kind(v) for v in text.split(",") if v.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
        return vals
    return parse


def _thresholds(text: str) -> list[float]:
    """Either a comma list (``1,0.5,0``) or a count of evenly spaced values (``21``)."""
    if "," not in text and "." not in text:
        try:
            n = int(text)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"bad thresholds {text!r}") from exc
        if n < 2:
            raise argparse.ArgumentTypeError("threshold count must be >= 2")
        return default_thresholds(n)
    vals = _csv(float)(text)
    if not vals or any(not 0.0 <= v <= 1.0 for v in vals):
        raise argparse.ArgumentTypeError("thresholds must lie in [0, 1]")
    return vals


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict) or set(raw) - {"model", "train", "synth"}:
        raise UsageError(f"{path}: expected an object with 'model', 'train' and/or 'synth' sections")
    return raw


def _given(args, name: str) -> bool:
    return getattr(args, name, None) is not None


def _model_config(args, file_cfg: dict, input_size: int | None = None) -> ModelConfig:
    raw = dict(file_cfg.get("model", {}))
    for flag, key in (("alpha", "alpha"), ("beta", "beta"), ("dilation", "d"),
                      ("base_channels", "base_channels"), ("pairing", "pairing")):
        if _given(args, flag):
            raw[key] = getattr(args, flag)
    if getattr(args, "no_lce", False):
        raw["use_lce"] = False
    if getattr(args, "no_cae", False):
        raw["use_cae"] = False
    if input_size is not None:
        raw["input_size"] = [input_size, input_size]
    try:
        return ModelConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid model config: {exc}") from exc


def _train_config(args, file_cfg: dict) -> TrainConfig:
    raw = dict(file_cfg.get("train", {}))
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "lr0"),
                      ("milestones", "milestones"), ("schedule", "schedule"), ("crop_size", "crop_size")):
        if _given(args, flag):
            raw[key] = getattr(args, flag)
    raw["seed"] = args.seed if _given(args, "seed") else raw.get("seed", 0)
    epochs = raw.get("epochs", TrainConfig.epochs)
    if "milestones" not in raw and epochs <= max(TrainConfig.milestones):
        # scale the default milestones to a shortened run
        raw["milestones"] = [m * epochs // 400 for m in TrainConfig.milestones if m * epochs // 400 > 0]
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid train config: {exc}") from exc


def _lca_params(args) -> LcaParams:
    try:
        return LcaParams(alpha=args.alpha if _given(args, "alpha") else 1.0,
                         beta=args.beta if _given(args, "beta") else 0.5,
                         d=args.dilation if _given(args, "dilation") else 1)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _dataset(root, subset: str):
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory not found: {root}")
    samples = load_dataset(root, subset)
    if not samples:
        raise UsageError(f"{root}: no '{subset}' samples in split manifest")
    return samples


def _write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def quantize(weights: np.ndarray) -> np.ndarray:
    """[0, 1] to 8-bit with round-half-up."""
    return np.floor(np.clip(weights, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


# subcommands ------------------------------------------------------------------

def cmd_attend(args) -> int:
    params = _lca_params(args)
    image = _read_gray(args.input)
    source = image if args.raw else standardize(image)
    weights = local_contrast_attention(source, params, args.pairing or "diagonals")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantize(weights), mode="L").save(out)
    np.save(out.with_suffix(".npy"), weights)
    print(f"wrote {out} and {out.with_suffix('.npy')} (min {weights.min():.6f}, max {weights.max():.6f})")
    return EXIT_OK


def cmd_synth(args) -> int:
    file_cfg = _read_config(args.config)
    raw = dict(file_cfg.get("synth", {}))
    if _given(args, "size"):
        raw["size"] = (args.size, args.size)
    if _given(args, "targets"):
        raw["targets"] = tuple(args.targets)
    try:
        spec = SynthSpec(**raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synth config: {exc}") from exc
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    entries = write_synth_dataset(args.out, args.count, spec, seed=args.seed or 0, test_fraction=args.test_fraction)
    n_test = sum(1 for _, s in entries if s == "test")
    print(f"wrote {len(entries)} samples ({len(entries) - n_test} train, {n_test} test) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    file_cfg = _read_config(args.config)
    train_cfg = _train_config(args, file_cfg)
    model_cfg = _model_config(args, file_cfg, input_size=train_cfg.crop_size)
    train_set = _dataset(args.data, "train")
    test_set = load_dataset(args.data, "test")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(
        {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}, indent=2, sort_keys=True) + "\n")
    net = LcaeNet(model_cfg, seed=train_cfg.seed)
    result = train_loop(net, train_set, train_cfg, test_set or None, out_dir=out, resume=args.resume,
                        progress=lambda row: print(
                            f"epoch {row['epoch']}\tlr {row['lr']:.3g}\tloss {row['loss']:.5f}\tiou {row['iou']:.4f}",
                            flush=True))
    if not test_set:
        print("no test split; skipped final evaluation")
        return EXIT_OK
    if result.best_state is not None:
        net.load_state_dict(result.best_state)
    report = evaluate_model(net, test_set)
    _write_text(out / "report.json", report.to_json() + "\n")
    print(EvalReport.header())
    print(report.to_row())
    return EXIT_OK


def _load(args) -> LcaeNet:
    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    net, _ = load_model(args.checkpoint)
    return net


def cmd_eval(args) -> int:
    net = _load(args)
    samples = _dataset(args.data, args.subset)
    report = evaluate_model(net, samples, threshold=args.threshold)
    text = EvalReport.header() + "\n" + report.to_row() + "\n"
    if args.out:
        _write_text(args.out, report.to_json() + "\n")
    print(text, end="")
    return EXIT_OK


def cmd_roc(args) -> int:
    net = _load(args)
    samples = _dataset(args.data, args.subset)
    size = net.config.input_size[0]
    from .data import pad_crop
    probs = predict_probs(net, samples)
    gts = [pad_crop(s, None, size, train=False).mask for s in samples]
    thresholds = args.thresholds or default_thresholds()
    table = format_roc(roc(probs, gts, thresholds))
    if args.out:
        _write_text(args.out, table)
    print(table, end="")
    return EXIT_OK


def _sweep_data(args, spec: SynthSpec):
    if args.data:
        return _dataset(args.data, "train"), _dataset(args.data, "test")
    return (synth_dataset(args.train_count, spec, seed=args.data_seed, prefix="train"),
            synth_dataset(args.test_count, spec, seed=args.data_seed + 1, prefix="test"))


def _best_flags(rows: list[dict]) -> list[str]:
    best = {"iou": max(r["iou"] for r in rows), "pd": max(r["pd"] for r in rows),
            "fa_e6": min(r["fa_e6"] for r in rows)}
    return [",".join(k for k in ("iou", "pd", "fa_e6") if r[k] == best[k]) or "-" for r in rows]


def cmd_sweep(args) -> int:
    file_cfg = _read_config(args.config)
    size = args.input_size
    spec = SynthSpec(**{**file_cfg.get("synth", {}), "size": (size, size)})
    train_cfg = _train_config(args, file_cfg)
    train_cfg = replace(train_cfg, crop_size=size)
    base = _model_config(args, file_cfg, input_size=size)
    if not args.ablation and any(v is not None and not v for v in (args.ds, args.alphas, args.betas)):
        raise UsageError("empty hyperparameter grid")
    train_set, test_set = _sweep_data(args, spec)

    def run(cfg: ModelConfig, seed: int) -> EvalReport:
        net = LcaeNet(cfg, seed=seed)
        result = train_loop(net, train_set, replace(train_cfg, seed=seed), test_set)
        if result.best_state is not None:
            net.load_state_dict(result.best_state)
        return evaluate_model(net, test_set)

    lines = []
    if args.ablation:
        seeds = args.seeds or [0, 1, 2]
        lines.append("seed\tlce\tiou\tpd\tfa_e6")
        deltas = []
        for seed in seeds:
            on = run(replace(base, use_lce=True), seed)
            off = run(replace(base, use_lce=False), seed)
            deltas.append(on.iou - off.iou)
            lines.append(f"{seed}\ton\t{on.iou:.6f}\t{on.pd:.6f}\t{on.fa_e6:.4f}")
            lines.append(f"{seed}\toff\t{off.iou:.6f}\t{off.pd:.6f}\t{off.fa_e6:.4f}")
        lines.append(f"# median IoU delta (on - off) over {len(seeds)} seeds: {statistics.median(deltas):+.6f}")
    else:
        grid = hyperparameter_grid(*(default if given is None else given for given, default in (
            (args.ds, (1, 2, 3, 4)), (args.alphas, (1.0, 1.5, 2.0)), (args.betas, (0.5, 1.0)))))
        if not grid:
            raise UsageError("empty hyperparameter grid")
        seed = args.seed if _given(args, "seed") else 0
        rows = []
        for params in grid:
            report = run(base.with_lca(params), seed)
            rows.append({"d": params.d, "alpha": params.alpha, "beta": params.beta,
                         "iou": report.iou, "pd": report.pd, "fa_e6": report.fa_e6})
            log.info("d=%d alpha=%g beta=%g iou=%.4f", params.d, params.alpha, params.beta, report.iou)
        lines.append("d\talpha\tbeta\tiou\tpd\tfa_e6\tbest")
        for r, flag in zip(rows, _best_flags(rows)):
            lines.append(f"{r['d']}\t{r['alpha']:g}\t{r['beta']:g}\t{r['iou']:.6f}\t{r['pd']:.6f}\t{r['fa_e6']:.4f}\t{flag}")
    table = "\n".join(lines) + "\n"
    if args.out:
        _write_text(args.out, table)
    print(table, end="")
    return EXIT_OK


def cmd_bench(args) -> int:
    file_cfg = _read_config(args.config)
    cfg = _model_config(args, file_cfg, input_size=args.input_size)
    net = LcaeNet(cfg, seed=args.seed or 0)
    net.eval()
    params = count_params(net)
    flops = count_flops(net)
    x = np.random.default_rng(0).standard_normal((args.batch, 1) + cfg.input_size).astype(np.float32)
    net(x)  # warm-up
    images, start = 0, time.perf_counter()
    while (elapsed := time.perf_counter() - start) < args.seconds or images == 0:
        net(x)
        images += args.batch
    elapsed = time.perf_counter() - start
    result = {"params": params, "flops": flops, "gflops": flops / 1e9,
              "images_per_sec": images / elapsed, "seconds": elapsed, "input_size": list(cfg.input_size),
              "base_channels": cfg.base_channels}
    if args.out:
        _write_text(args.out, json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(f"params\t{params}\nflops\t{flops}\ngflops\t{flops / 1e9:.4f}\nimages_per_sec\t{images / elapsed:.3f}")
    return EXIT_OK


# parser -----------------------------------------------------------------------

def _lca_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", type=float, help="centre weight (default 1)")
    p.add_argument("--beta", type=float, help="neighbour weight (default 0.5)")
    p.add_argument("--dilation", type=int, help="neighbour offset d (default 1)")
    p.add_argument("--pairing", choices=sorted(PAIRINGS), help="how the four contrast maps are paired")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--milestones", type=_csv(int), help="comma-separated decay epochs")
    p.add_argument("--schedule", choices=("step", "poly"))
    p.add_argument("--base-channels", type=int)
    p.add_argument("--no-lce", action="store_true", help="replace contrast attention by ones")
    p.add_argument("--no-cae", action="store_true", help="disable channel attention")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lcaenet", description="Infrared small-target detection toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("attend", help="write the contrast-attention map of an image")
    p.add_argument("input")
    p.add_argument("--out", required=True, help="8-bit PNG path; a .npy with raw values is written beside it")
    p.add_argument("--raw", action="store_true", help="use raw intensities instead of the standardized image")
    _lca_flags(p)
    p.set_defaults(func=cmd_attend)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=int, help="square image side")
    p.add_argument("--targets", type=int, nargs=2, metavar=("MIN", "MAX"), help="targets per image")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--config")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a network on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--crop-size", type=int, help="training/eval square size (default 256)")
    p.add_argument("--resume", help="state.ckpt from an earlier run")
    _lca_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "IoU/Pd/Fa of a checkpoint"),
                                 ("roc", cmd_roc, "(Fa, Pd) per threshold")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("checkpoint")
        p.add_argument("--data", required=True)
        p.add_argument("--subset", default="test", choices=("train", "test"))
        p.add_argument("--out")
        if name == "eval":
            p.add_argument("--threshold", type=float, default=0.5)
        else:
            p.add_argument("--thresholds", type=_thresholds, help="comma list or a count (default 21)")
        p.set_defaults(func=func)

    p = sub.add_parser("sweep", help="train/evaluate over a (d, alpha, beta) grid, or LCE on/off")
    p.add_argument("--data", help="dataset directory (default: generate synthetic data)")
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--ds", type=_csv(int), help="comma list of d values")
    p.add_argument("--alphas", type=_csv(float))
    p.add_argument("--betas", type=_csv(float))
    p.add_argument("--ablation", action="store_true", help="compare LCE on/off instead of the grid")
    p.add_argument("--seeds", type=_csv(int), help="ablation seeds (default 0,1,2)")
    p.add_argument("--input-size", type=int, default=64)
    p.add_argument("--train-count", type=int, default=300)
    p.add_argument("--test-count", type=int, default=60)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--crop-size", type=int, help=argparse.SUPPRESS)
    _lca_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_sweep, epochs_default=20)

    p = sub.add_parser("bench", help="parameter count, FLOPs and throughput")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--input-size", type=int, default=256)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--seconds", type=float, default=3.0)
    _lca_flags(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "sweep":
        if args.epochs is None:
            args.epochs = args.epochs_default
        if args.base_channels is None:
            args.base_channels = 8
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"lcaenet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, FloatingPointError) as exc:
        print(f"lcaenet {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, InputError, DimensionError, CheckpointError) as exc:
        print(f"lcaenet {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"lcaenet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
