"""Command-line entry point: ``metareplay <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .data import save_dataset
from .errors import MetaReplayError
from .presets import LR_SWEEP, apply_overrides, get_preset, read_config_file

log = logging.getLogger("metareplay")


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _key_value(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=None, help="master seed (overrides the preset)")
    shared.add_argument("--config", type=Path, default=None, help="key=value file of section.key overrides")
    shared.add_argument("--set", dest="overrides", type=_key_value, action="append", default=[], metavar="KEY=VALUE")
    shared.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    shared.add_argument("--preset", default="toy")
    shared.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="metareplay", description="Meta continual learning with compressed latent replay.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[shared], help="write the preset's synthetic dataset")

    m = sub.add_parser("meta-train", parents=[shared], help="meta-train and fit the PQ codebook")
    m.add_argument("--outer-steps", type=int, default=None)
    m.add_argument("--data", type=Path, default=None, help="dataset directory (default: generate from preset)")

    d = sub.add_parser("deploy", parents=[shared], help="continual learning over the meta-test stream")
    d.add_argument("--model-dir", type=Path, required=True)
    d.add_argument("--data", type=Path, default=None)
    d.add_argument("--classes", type=int, default=None, help="number of meta-test classes to learn")
    d.add_argument("--samples-per-class", type=int, default=None)
    d.add_argument("--replay-epochs", type=int, default=None)
    d.add_argument("--codec", choices=("bitpq", "bitmap", "raw"), default="bitpq")
    d.add_argument("--quantize", action="store_true", help="run the extractor in int8")
    d.add_argument("--lr-sweep", action="store_true", help="try the replay learning-rate sweep and keep the best")

    b = sub.add_parser("bench-compress", parents=[shared], help="compression ratio and error grid")
    b.add_argument("--sparsity", type=_csv_floats, default=[0.5, 0.8, 0.9, 0.95])
    b.add_argument("--subvec-len", type=_csv_ints, default=[8, 32, 128])
    b.add_argument("--latent-dim", type=_csv_ints, default=[2304])
    b.add_argument("--train-count", type=int, default=512)
    b.add_argument("--test-count", type=int, default=128)

    r = sub.add_parser("report-memory", parents=[shared], help="deployment memory footprint")
    r.add_argument("--model-dir", type=Path, required=True)
    r.add_argument("--buffer", type=Path, default=None)
    r.add_argument("--codec", choices=("bitpq", "bitmap"), default=None)
    r.add_argument("--batch-size", type=int, default=8)

    for parser in (g, m, d, b, r):
        parser.set_defaults(parser=parser)
    return p


def _resolve_preset(args, base=None):
    preset = base if base is not None else get_preset(args.preset)
    overrides = {}
    if args.config is not None:
        overrides.update(read_config_file(args.config))
    overrides.update(dict(args.overrides))
    if getattr(args, "outer_steps", None) is not None:
        overrides["cfg.outer_steps"] = str(args.outer_steps)
    preset = apply_overrides(preset, overrides)
    if args.seed is not None:
        preset = preset.with_seed(args.seed)
    return preset


def cmd_gen_data(args) -> None:
    preset = _resolve_preset(args)
    ds = harness.load_data(preset)
    path = save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {path}")


def cmd_meta_train(args) -> None:
    preset = _resolve_preset(args)
    data = harness.load_data(preset, args.data)
    art = harness.run_meta_train(preset, args.out, data)
    print(f"meta-trained {preset.cfg.outer_steps} steps, final loss {art.losses[-1] if art.losses else float('nan'):.4f}; wrote {args.out}")


def cmd_deploy(args) -> None:
    model, codebook, saved = harness.load_trained(args.model_dir)
    preset = _resolve_preset(args, saved)
    opts = harness.DeployOptions(
        num_classes=args.classes,
        samples_per_class=args.samples_per_class,
        replay_epochs=args.replay_epochs,
        codec=args.codec,
        quantize=args.quantize,
        lr_sweep=LR_SWEEP if args.lr_sweep else (),
    )
    report = harness.run_deploy(model, codebook, preset, opts, args.out, harness.load_data(preset, args.data))
    print(f"final_test_acc={report.final_test_acc:.4f} buffer_bytes={report.buffer_bytes}; wrote {args.out}")


def cmd_bench_compress(args) -> None:
    seed = 0 if args.seed is None else args.seed
    rows = harness.bench_compress(args.sparsity, args.subvec_len, args.latent_dim, seed, args.train_count, args.test_count)
    path = harness.write_bench(rows, args.out)
    for row in rows:
        print(" ".join(f"{k}={row[k]}" for k in ("sparsity", "subvec_len", "latent_dim", "ratio", "test_rel_mse")))
    print(f"wrote {path}")


def cmd_report_memory(args) -> None:
    print(harness.run_report_memory(args.model_dir, args.out, args.buffer, args.codec, args.batch_size), end="")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "meta-train": cmd_meta_train,
    "deploy": cmd_deploy,
    "bench-compress": cmd_bench_compress,
    "report-memory": cmd_report_memory,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (MetaReplayError, OSError, KeyError, ValueError) as exc:
        print(f"metareplay {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
