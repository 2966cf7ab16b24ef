"""Command-line entry point.

Subcommands: train, sample, metrics, diagnose, flops, ablate. All failures
exit nonzero with a one-line reason on stderr. Environment overrides:
XSGAN_OUT sets the default output directory, XSGAN_THREADS caps torch's
intra-op thread count.
"""

import argparse
import os
import sys

from .config import ExperimentConfig, parse_kv_text
from .errors import ConfigError


def _default_out(sub: str) -> str:
    return os.path.join(os.environ.get("XSGAN_OUT", "runs"), sub)


def _setup_torch():
    import torch

    threads = os.environ.get("XSGAN_THREADS")
    if threads is not None:
        try:
            n = int(threads)
        except ValueError:
            raise ConfigError(f"XSGAN_THREADS must be an integer, got {threads!r}") from None
        if n < 1:
            raise ConfigError(f"XSGAN_THREADS must be >= 1, got {n}")
        torch.set_num_threads(n)
    return torch


def _load_config(path) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    return ExperimentConfig.from_file(path)


def cmd_train(args) -> int:
    _setup_torch()
    from .training import train

    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides({"train_seed": str(args.seed)})
    out_dir = args.out or _default_out(f"train-{cfg.config_hash()}")
    result = train(cfg, out_dir, resume=args.resume)
    print(f"trained {result.iterations} iterations")
    print(f"loss log: {result.csv_path}")
    print(f"last checkpoint: {result.last_checkpoint}")
    return 0


def cmd_sample(args) -> int:
    torch = _setup_torch()
    from .data import save_image_grid, to_uint8
    from .training import generate_samples, load_checkpoint, restore_models

    payload = load_checkpoint(args.ckpt)
    cfg, gen, _, ema = restore_models(payload)
    model = gen if args.raw else ema
    model.eval()
    if not 0 <= args.class_id < cfg.data.num_classes:
        raise ConfigError(f"class {args.class_id} out of range "
                          f"[0, {cfg.data.num_classes})")
    if args.n < 1:
        raise ConfigError(f"--n must be positive, got {args.n}")
    labels = torch.full((args.n,), args.class_id, dtype=torch.int64)
    pyramid, _ = generate_samples(model, args.n, cfg.data.num_classes,
                                  seed=args.seed, psi=args.psi, labels=labels)
    save_image_grid(to_uint8(pyramid.x[-1].numpy()), args.out)
    print(f"wrote {args.n} samples of class {args.class_id} to {args.out}")
    return 0


def _checkpoint_list(path) -> list:
    import glob

    if os.path.isdir(path):
        found = sorted(glob.glob(os.path.join(path, "ckpt-*.pt")))
        if not found:
            raise ConfigError(f"no checkpoints found in {path}")
        return found
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint not found: {path}")
    return [path]


def cmd_metrics(args) -> int:
    _setup_torch()
    from .diagnostics import emit_metrics
    from .training import evaluate_checkpoint

    series = []
    for ckpt in _checkpoint_list(args.ckpt):
        report = evaluate_checkpoint(ckpt, num_samples=args.samples, seed=args.seed)
        series.append((report["iteration"], report["trajectory"]))
    series.sort(key=lambda item: item[0])
    emit_metrics(series, args.out, plot_path=args.plot)
    print(f"wrote trajectory metrics for {len(series)} checkpoint(s) to {args.out}")
    return 0


def cmd_diagnose(args) -> int:
    _setup_torch()
    from .training import evaluate_checkpoint

    want_attention = args.mode == "attention"
    report = evaluate_checkpoint(args.ckpt, num_samples=args.samples, seed=args.seed,
                                 compute_attention=want_attention)
    print(f"checkpoint iteration {report['iteration']} "
          f"(discriminator mode: {report['mode']})")
    if args.mode == "trajectory":
        tm = report["trajectory"]
        print("k  delta(mean/std)        rewrite(mean/std)      align(mean/std)")
        for k in range(len(tm.delta_mean)):
            print(f"{k}  {tm.delta_mean[k]:.6f} / {tm.delta_std[k]:.6f}  "
                  f"{tm.rewrite_mean[k]:.6f} / {tm.rewrite_std[k]:.6f}  "
                  f"{tm.align_mean[k]:.6f} / {tm.align_std[k]:.6f}")
        print(f"degenerate samples excluded: {tm.degenerate}")
        print(f"distribution distance (toy frechet): {report['frechet']:.6f}")
    else:
        dep = report["attention"]
        for i, frac in enumerate(dep.per_layer):
            print(f"layer {i}: cross-scale attention fraction {frac:.6f}")
        print(f"layer mean: {dep.layer_mean:.6f}")
        if args.out:
            _dump_attention(args.ckpt, args.out, args.samples, args.seed)
            print(f"attention dump: {args.out}")
    return 0


def _dump_attention(ckpt_path, out_path, samples, seed):
    import torch

    from .data import synth_dataset
    from .discriminator import write_attention_dump
    from .pyramid import build_pyramids
    from .training import load_checkpoint, restore_models

    payload = load_checkpoint(ckpt_path)
    cfg, _, disc, _ = restore_models(payload, keep_attention=True)
    disc.eval()
    dataset = synth_dataset(cfg.data)
    n = min(samples or 64, 64)
    images = torch.from_numpy(dataset.images[:n])
    labels = torch.from_numpy(dataset.labels[:n])
    with torch.no_grad():
        maps = disc.attention_maps(build_pyramids(images, cfg.generator), labels)
    write_attention_dump(out_path, maps)


def cmd_flops(args) -> int:
    from .flops import (TABLE4_COLUMNS, TABLE6_COLUMNS, load_ledger,
                        render_table_csv, render_table_text, table4_rows,
                        table6_rows)

    entries = load_ledger(args.config)
    render = render_table_csv if args.format == "csv" else render_table_text
    blocks = []
    if args.table in (None, "6"):
        blocks.append(render(table6_rows(entries), TABLE6_COLUMNS))
    if args.table in (None, "4"):
        blocks.append(render(table4_rows(entries), TABLE4_COLUMNS))
    print("\n\n".join(blocks))
    return 0


def cmd_ablate(args) -> int:
    _setup_torch()
    from .training import run_ablation

    cfg = _load_config(args.config)
    if not os.path.exists(args.sweep):
        raise ConfigError(f"sweep file not found: {args.sweep}")
    with open(args.sweep, "r", encoding="utf-8") as fh:
        sweep_kv = parse_kv_text(fh.read())
    out_dir = args.out or _default_out(f"ablate-{cfg.config_hash()}")
    result = run_ablation(cfg, sweep_kv, out_dir)
    print(f"report: {result['report_path']}")
    print(f"verdicts: {result['verdict_path']}")
    for v in result["verdicts"]:
        print(f"{v['check']}: {v['value']} (threshold {v['threshold']}) -> {v['status']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xsgan",
        description="Multi-scale transformer GAN: training, sampling, and diagnostics.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override train_seed")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--resume", action="store_true",
                   help="continue from the latest checkpoint in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="write an image grid from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--class", dest="class_id", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--psi", type=float, default=1.0, help="latent truncation in [0, 1]")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--raw", action="store_true", help="use raw instead of EMA weights")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("metrics", help="trajectory metrics CSV for checkpoint(s)")
    p.add_argument("--ckpt", required=True, help="checkpoint file or run directory")
    p.add_argument("--out", required=True)
    p.add_argument("--plot", default=None, help="optional PNG with the metric curves")
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--seed", type=int, default=1234)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("diagnose", help="inspect one checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=("trajectory", "attention"), required=True)
    p.add_argument("--out", default=None,
                   help="attention mode: write the raw attention dump here")
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--seed", type=int, default=1234)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("flops", help="analytic compute tables from ledger configs")
    p.add_argument("--config", required=True, help="ledger entry file or directory")
    p.add_argument("--table", choices=("4", "6"), default=None,
                   help="print only the budget (4) or per-model (6) table")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("ablate", help="run a variant/seed sweep and verdicts")
    p.add_argument("--config", required=True)
    p.add_argument("--sweep", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
