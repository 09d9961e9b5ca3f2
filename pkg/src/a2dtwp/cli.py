# coding=utf-8
# Copyright 2025. All rights reserved.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""
Command-line front end.

Usage:

a2dtwp pack --input weights.f32 --round-to 2 --output weights.adt
a2dtwp unpack --input weights.adt --output restored.f32
a2dtwp bench-codec --sizes 1048576 4194304 --workers 1 2 8 --output bench.csv
a2dtwp train --config configs/blobs/a2dtwp.yaml --seed 42 [--field value ...]
a2dtwp report --run-dir outputs/a2dtwp --baseline-dir outputs/baseline
a2dtwp oracle-sweep --config configs/blobs/oracle.yaml --seed 42 --target-accuracy 0.9
a2dtwp make-blobs --output data/blobs.csv --seed 0

Exit codes: 0 success, 1 I/O or input-format error, 2 usage or config validation error,
3 malformed ADT1 container, 4 codec equivalence precheck failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import transformers

from . import __version__
from .awp import read_trace_csv, widening_events
from .bench import EquivalenceError, bench_codec, results_frame
from .codec import WORD_BYTES, MalformedBlock, decode_container, encode_container, pack_parallel, unpack
from .configs import VALID_BITS, ConfigError, load_run_config
from .transfer import profile_report
from .trainer import load_run_outputs, oracle_sweep, run_training
from .utils import make_blobs, save_dataset


logger = logging.getLogger("a2dtwp")

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2
EXIT_MALFORMED = 3
EXIT_PRECHECK = 4

LOG_LEVELS = ["debug", "info", "warning", "error"]


def setup_logging(log_level: str) -> None:
    logging.basicConfig(
        format="%(asctime)s - %(levelname)s - %(name)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
        handlers=[logging.StreamHandler(sys.stdout)],
    )
    set_log_level(log_level)


def set_log_level(log_level: str) -> None:
    level = logging.getLevelName(log_level.upper())
    logger.setLevel(level)
    transformers.utils.logging.set_verbosity(level)


def read_weights(path) -> np.ndarray:
    """Raw little-endian float32 words, or numbers in a headerless `.csv` (any row/column layout)."""
    path = Path(path)
    if path.suffix == ".csv":
        if path.stat().st_size == 0:
            return np.empty(0, dtype=np.float32)
        frame = pd.read_csv(path, header=None)
        return frame.to_numpy(dtype=np.float32).reshape(-1)
    data = path.read_bytes()
    if len(data) % WORD_BYTES:
        raise ValueError(f"{path}: {len(data)} bytes is not a whole number of float32 words")
    return np.frombuffer(data, dtype="<f4").astype(np.float32)


def cmd_pack(args: argparse.Namespace) -> int:
    weights = read_weights(args.input)
    block = pack_parallel(weights, args.round_to, args.workers, vectorized=True)
    data = encode_container(block)
    Path(args.output).write_bytes(data)
    payload_ratio = len(block.payload) / block.raw_bytes if block.raw_bytes else args.round_to / WORD_BYTES
    print(
        f"weights={block.weight_count} round_to={block.round_to.bytes_kept} raw_bytes={block.raw_bytes} "
        f"payload_bytes={len(block.payload)} wire_bytes={len(data)} payload_ratio={payload_ratio:.4f}"
    )
    return EXIT_OK


def cmd_unpack(args: argparse.Namespace) -> int:
    data = Path(args.input).read_bytes()
    block = decode_container(data)
    weights = unpack(block)
    Path(args.output).write_bytes(weights.astype("<f4").tobytes())
    print(f"weights={block.weight_count} round_to={block.round_to.bytes_kept} bytes_written={weights.nbytes}")
    return EXIT_OK


def cmd_bench_codec(args: argparse.Namespace) -> int:
    results = bench_codec(
        sizes=args.sizes,
        round_tos=args.round_to,
        worker_counts=args.workers,
        repeats=args.repeats,
        seed=args.seed,
        precheck_weights=args.precheck_weights,
    )
    frame = results_frame(results)
    if args.output:
        frame.to_csv(args.output, index=False)
        logger.info(f"Benchmark results written to {args.output}")
    else:
        frame.to_csv(sys.stdout, index=False)
    return EXIT_OK


def _config_args(args: argparse.Namespace, overrides: list[str]) -> list[str]:
    forwarded = list(overrides)
    if args.seed is not None:
        forwarded += ["--seed", str(args.seed)]
    return forwarded


def cmd_train(args: argparse.Namespace, overrides: list[str]) -> int:
    config = load_run_config(args.config, _config_args(args, overrides))
    if args.print_defaults:
        print(config.to_yaml(), end="")
        return EXIT_OK
    if args.log_level is None:
        set_log_level(config.run.log_level)

    result = run_training(config, output_dir=config.run.output_dir)
    report = profile_report(result.ledger, result.wall_times)
    print(report.to_text())
    print(f"Final validation top-1: {result.final_val_top1:.4f}")
    return EXIT_OK


def _final_accuracy(run_dir: Path) -> Optional[float]:
    summary_path = run_dir / "summary.json"
    if not summary_path.exists():
        return None
    with open(summary_path, "r", encoding="utf-8") as f:
        return json.load(f).get("final_val_top1")


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    ledger, wall_times = load_run_outputs(run_dir)
    baseline = None
    if args.baseline_dir:
        baseline = load_run_outputs(args.baseline_dir)
    report = profile_report(ledger, wall_times, baseline=baseline)

    accuracy = {"run": _final_accuracy(run_dir)}
    if args.baseline_dir:
        accuracy["baseline"] = _final_accuracy(Path(args.baseline_dir))
        if accuracy["run"] is not None and accuracy["baseline"] is not None:
            accuracy["delta_pp"] = 100.0 * (accuracy["run"] - accuracy["baseline"])

    widenings = {}
    trace_path = run_dir / "awp_trace.csv"
    if trace_path.exists():
        widenings = widening_events(read_trace_csv(trace_path))

    if args.json:
        output = report.to_dict()
        output["val_top1"] = accuracy
        output["widenings"] = {str(layer): events for layer, events in widenings.items()}
        print(json.dumps(output, indent=2))
        return EXIT_OK

    print(report.to_text())
    if accuracy["run"] is not None:
        line = f"Final validation top-1: {accuracy['run']:.4f}"
        if "delta_pp" in accuracy:
            line += f" (baseline {accuracy['baseline']:.4f}, delta {accuracy['delta_pp']:+.2f} pp)"
        print(line)
    for layer, events in sorted(widenings.items()):
        steps = ", ".join(f"{bits} bits @ batch {batch}" for batch, bits in events) or "never widened"
        print(f"Layer {layer}: {steps}")
    return EXIT_OK


def cmd_oracle_sweep(args: argparse.Namespace, overrides: list[str]) -> int:
    config = load_run_config(args.config, _config_args(args, overrides))
    if args.log_level is None:
        set_log_level(config.run.log_level)
    frame, selected = oracle_sweep(config, bits=args.bits, target_accuracy=args.target_accuracy)
    sweep_path = Path(config.run.output_dir) / "oracle_sweep.csv"
    sweep_path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(sweep_path, index=False)
    print(frame.to_string(index=False))
    print(f"Selected oracle format: {'none' if selected is None else f'{selected} bits'}")
    return EXIT_OK


def cmd_make_blobs(args: argparse.Namespace) -> int:
    dataset = make_blobs(args.num_samples, args.num_features, args.num_classes, args.std, args.spread, seed=args.seed)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, args.output)
    print(f"samples={len(dataset)} features={dataset.num_features} classes={dataset.num_classes} path={args.output}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="a2dtwp", description="Adaptive weight precision and byte-truncation tools.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", choices=LOG_LEVELS, default=None, help="Logging level (default: info).")
    subparsers = parser.add_subparsers(dest="command", required=True)

    pack_parser = subparsers.add_parser("pack", help="Pack a float32 file into an ADT1 container.")
    pack_parser.add_argument("--input", required=True, help="Raw little-endian float32 file or .csv of numbers.")
    pack_parser.add_argument("--round-to", type=int, required=True, choices=range(1, WORD_BYTES + 1))
    pack_parser.add_argument("--output", required=True)
    pack_parser.add_argument("--workers", type=int, default=1, help="Packing threads.")
    pack_parser.set_defaults(handler=cmd_pack)

    unpack_parser = subparsers.add_parser("unpack", help="Restore a raw float32 file from an ADT1 container.")
    unpack_parser.add_argument("--input", required=True)
    unpack_parser.add_argument("--output", required=True)
    unpack_parser.set_defaults(handler=cmd_unpack)

    bench_parser = subparsers.add_parser("bench-codec", help="Time the scalar, vectorized and parallel pack paths.")
    bench_parser.add_argument("--sizes", type=int, nargs="+", default=[1 << 20, 1 << 22], help="Weights per array.")
    bench_parser.add_argument(
        "--round-to", type=int, nargs="+", default=[1, 2, 3, 4], choices=range(1, WORD_BYTES + 1)
    )
    bench_parser.add_argument("--workers", type=int, nargs="+", default=[1, 2, 4, 8])
    bench_parser.add_argument("--repeats", type=int, default=5)
    bench_parser.add_argument("--seed", type=int, default=0)
    bench_parser.add_argument("--precheck-weights", type=int, default=1_000_000)
    bench_parser.add_argument("--output", default=None, help="CSV path (default: stdout).")
    bench_parser.set_defaults(handler=cmd_bench_codec)

    train_parser = subparsers.add_parser(
        "train",
        help="Train a network in baseline, oracle or a2dtwp mode.",
        description="Extra `--<field> <value>` flags override any field of the YAML config.",
    )
    train_parser.add_argument("--config", default=None, help="YAML config with data/model/sgd/awp/link/run sections.")
    train_parser.add_argument("--seed", type=int, default=None)
    train_parser.add_argument("--print-defaults", action="store_true", help="Print the resolved config and exit.")
    train_parser.set_defaults(handler=cmd_train, takes_overrides=True)

    report_parser = subparsers.add_parser("report", help="Phase breakdown of a finished run.")
    report_parser.add_argument("--run-dir", required=True)
    report_parser.add_argument("--baseline-dir", default=None)
    report_parser.add_argument("--json", action="store_true")
    report_parser.set_defaults(handler=cmd_report)

    sweep_parser = subparsers.add_parser("oracle-sweep", help="Pick the fixed width that reaches a target fastest.")
    sweep_parser.add_argument("--config", default=None)
    sweep_parser.add_argument("--seed", type=int, default=None)
    sweep_parser.add_argument("--bits", type=int, nargs="+", default=list(VALID_BITS), choices=VALID_BITS)
    sweep_parser.add_argument("--target-accuracy", type=float, default=None)
    sweep_parser.set_defaults(handler=cmd_oracle_sweep, takes_overrides=True)

    blobs_parser = subparsers.add_parser("make-blobs", help="Write the seeded Gaussian-blob dataset.")
    blobs_parser.add_argument("--output", required=True, help=".csv or binary output path.")
    blobs_parser.add_argument("--num-samples", type=int, default=10_000)
    blobs_parser.add_argument("--num-features", type=int, default=32)
    blobs_parser.add_argument("--num-classes", type=int, default=4)
    blobs_parser.add_argument("--std", type=float, default=1.0)
    blobs_parser.add_argument("--spread", type=float, default=0.5)
    blobs_parser.add_argument("--seed", type=int, default=0)
    blobs_parser.set_defaults(handler=cmd_make_blobs)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args, overrides = parser.parse_known_args(argv)
    takes_overrides = getattr(args, "takes_overrides", False)
    if overrides and not takes_overrides:
        parser.error(f"unrecognized arguments: {' '.join(overrides)}")
    if args.command in ("train", "oracle-sweep") and args.seed is None and not getattr(args, "print_defaults", False):
        parser.error(f"{args.command}: --seed is required")

    setup_logging(args.log_level or "info")
    try:
        if takes_overrides:
            return args.handler(args, overrides)
        return args.handler(args)
    except ConfigError as e:
        logger.error(str(e))
        return EXIT_USAGE
    except MalformedBlock as e:
        logger.error(f"malformed ADT1 container: {e}")
        return EXIT_MALFORMED
    except EquivalenceError as e:
        logger.error(f"codec equivalence precheck failed: {e}")
        return EXIT_PRECHECK
    except (OSError, ValueError) as e:
        logger.error(str(e))
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
