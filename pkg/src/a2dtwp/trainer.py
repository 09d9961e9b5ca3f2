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
Data-parallel SGD over simulated workers, with every weight transfer routed through the codec.

Per batch:

1. each layer's master weights are packed at the layer's current width, sent to every worker and
   unpacked into that worker's copy; biases travel uncompressed,
2. the batch is cut into a fixed number of shards, workers take contiguous runs of shards and
   compute one gradient contribution per shard on their (truncated) copies,
3. contributions return to the host and are reduced in shard order into one momentum SGD step
   on the full-precision master weights,
4. the precision controller observes the master weights' l2-norms.

Since shards, not workers, define the reduction, the update does not depend on the worker count.
"""

import dataclasses
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import pandas as pd
import torch
from transformers import set_seed

from .awp import AwpController, l2_norm, write_trace_csv
from .codec import RoundTo, chunk_bounds
from .configs import VALID_BITS, RunConfig, SgdConfig
from .model import (
    DenseNetwork,
    GradientSet,
    backward,
    build_optimizer,
    build_scheduler,
    evaluate,
    forward,
    gather_and_update,
)
from .transfer import Direction, LinkModel, PayloadKind, TransferBoundary, TransferLedger, profile_report
from .utils import Dataset, PhaseTimer, get_dataset, iterate_batches
from .utils.callbacks import get_callbacks


logger = logging.getLogger(__name__)

METRICS_COLUMNS = ["epoch", "batch", "loss", "val_top1", "bytes_sent", "codec_ms"]


@dataclass
class TrainingState:
    """Everything the batch loop carries across epochs."""

    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    scheduler: Optional[torch.optim.lr_scheduler.LRScheduler] = None
    num_workers: int = 1
    reduction_shards: int = 4
    # width used when no controller drives the layers; None ships raw 32-bit words
    fixed_round_to: Optional[RoundTo] = None
    global_batch: int = 0
    timer: PhaseTimer = field(default_factory=PhaseTimer)


@dataclass
class EpochStats:
    epoch: int
    batch: int
    loss: float
    loss_curve: list[float]
    bytes_sent: int
    codec_seconds: float
    bits_per_layer: list[int]
    val_top1: float = float("nan")
    accounted_seconds: float = 0.0


@contextmanager
def _boundary_phase(timer: PhaseTimer, transfer: Optional[TransferBoundary]):
    """Times host/worker copies under `boundary`, minus the codec time the ledger already books."""
    codec_before = transfer.codec_seconds if transfer is not None else 0.0
    start = time.perf_counter()
    try:
        yield
    finally:
        elapsed = time.perf_counter() - start
        codec = transfer.codec_seconds - codec_before if transfer is not None else 0.0
        timer.add("boundary", max(elapsed - codec, 0.0))


def _timed_batches(batches: Iterator[Dataset], timer: PhaseTimer) -> Iterator[Dataset]:
    while True:
        with timer.phase("batching"):
            batch_data = next(batches, None)
        if batch_data is None:
            return
        yield batch_data


def _worker_parameters(
    net: DenseNetwork,
    transfer: Optional[TransferBoundary],
    awp: Optional[AwpController],
    state: TrainingState,
    batch: int,
) -> list[tuple[list[torch.Tensor], list[torch.Tensor]]]:
    """Per-worker (weights, biases) copies as they look after crossing the boundary."""
    copies: list[tuple[list[torch.Tensor], list[torch.Tensor]]] = [([], []) for _ in range(state.num_workers)]
    for layer in range(net.num_layers):
        master_weight = net.weights[layer].detach()
        master_bias = net.biases[layer].detach()
        if transfer is None:
            weights = [master_weight.clone() for _ in range(state.num_workers)]
            biases = [master_bias.clone() for _ in range(state.num_workers)]
        else:
            round_to = awp.current_round_to(layer) if awp is not None else state.fixed_round_to
            weights = [
                torch.from_numpy(copy)
                for copy in transfer.push_weights(master_weight.numpy(), round_to, batch, layer, state.num_workers)
            ]
            biases = [
                torch.from_numpy(copy)
                for copy in transfer.push_biases(master_bias.numpy(), batch, layer, state.num_workers)
            ]
        for worker in range(state.num_workers):
            copies[worker][0].append(weights[worker].requires_grad_(True))
            copies[worker][1].append(biases[worker].requires_grad_(True))
    return copies


def train_epoch(
    net: DenseNetwork,
    dataset: Dataset,
    cfg: SgdConfig,
    transfer: Optional[TransferBoundary],
    awp: Optional[AwpController],
    state: TrainingState,
    epoch: int = 0,
) -> EpochStats:
    """One pass over `dataset`. `transfer=None` runs the same loop with no boundary and no accounting."""
    timer = state.timer
    first_batch = state.global_batch
    loss_curve = []

    for batch_data in _timed_batches(iterate_batches(dataset, cfg.batch_size, state.rng), timer):
        batch = state.global_batch
        with _boundary_phase(timer, transfer):
            worker_params = _worker_parameters(net, transfer, awp, state, batch)

        with timer.phase("batching"):
            shards = [idx for idx in np.array_split(np.arange(len(batch_data)), state.reduction_shards) if idx.size]
        contributions: list[GradientSet] = []
        batch_loss = 0.0
        for worker, (start, stop) in enumerate(chunk_bounds(len(shards), state.num_workers)):
            weights, biases = worker_params[worker]
            worker_grads = []
            for idx in shards[start:stop]:
                with timer.phase("forward"):
                    inputs = torch.from_numpy(batch_data.features[idx])
                    labels = torch.from_numpy(batch_data.labels[idx])
                    result = forward(net, inputs, labels, weights=weights, biases=biases)
                    batch_loss += result.loss.item() * result.sample_count
                with timer.phase("backward"):
                    worker_grads.append(backward(net, result))
            if transfer is not None and worker_grads:
                with _boundary_phase(timer, transfer):
                    worker_grads = _return_gradients(transfer, worker_grads, batch)
            contributions.extend(worker_grads)

        with timer.phase("update"):
            gather_and_update(net, contributions, state.optimizer)
            if state.scheduler is not None:
                state.scheduler.step()

        if awp is not None:
            with timer.phase("awp_norm"):
                norms = [l2_norm(weight.detach().numpy()) for weight in net.weights]
                awp.observe_norms(norms, batch=batch)

        loss_curve.append(batch_loss / len(batch_data))
        logger.debug(f"epoch {epoch} batch {batch}: loss {loss_curve[-1]:.6f}")
        state.global_batch += 1

    bytes_sent = 0
    codec_seconds = 0.0
    if transfer is not None:
        epoch_records = [record for record in transfer.ledger if record.batch >= first_batch]
        bytes_sent = sum(record.wire_bytes for record in epoch_records)
        codec_seconds = sum(record.pack_seconds + record.unpack_seconds for record in epoch_records)

    return EpochStats(
        epoch=epoch,
        batch=state.global_batch,
        loss=float(np.mean(loss_curve)) if loss_curve else float("nan"),
        loss_curve=loss_curve,
        bytes_sent=bytes_sent,
        codec_seconds=codec_seconds,
        bits_per_layer=awp.bits_per_layer() if awp is not None else _fixed_bits(net, state),
    )


def _fixed_bits(net: DenseNetwork, state: TrainingState) -> list[int]:
    bits = 32 if state.fixed_round_to is None else state.fixed_round_to.bytes_kept * 8
    return [bits] * net.num_layers


def _return_gradients(transfer: TransferBoundary, grads: list[GradientSet], batch: int) -> list[GradientSet]:
    arrays = [array.numpy() for contribution in grads for array in contribution.arrays()]
    received = iter(transfer.pull_gradients(arrays, batch))
    returned = []
    for contribution in grads:
        weight_grads = [torch.from_numpy(next(received)) for _ in contribution.weight_grads]
        bias_grads = [torch.from_numpy(next(received)) for _ in contribution.bias_grads]
        returned.append(GradientSet(weight_grads, bias_grads, contribution.sample_count))
    return returned


@dataclass
class RunResult:
    net: DenseNetwork
    epochs: list[EpochStats]
    ledger: TransferLedger
    awp: Optional[AwpController]
    wall_times: dict[str, float]
    summary: dict

    @property
    def final_val_top1(self) -> float:
        return self.epochs[-1].val_top1

    def weight_wire_bytes(self) -> int:
        return self.ledger.total_wire_bytes(direction=Direction.TO_WORKER, kind=PayloadKind.WEIGHTS)


def run_training(config: RunConfig, output_dir: Optional[str] = None) -> RunResult:
    """Runs the configured mode end to end and, if `output_dir` is given, writes all run artifacts."""
    run = config.run
    if run.seed is None:
        raise ValueError("run.seed is required for training")
    set_seed(run.seed)

    train, val = get_dataset(config.data, seed=run.seed)
    num_classes = int(max(train.labels.max(), val.labels.max())) + 1
    generator = torch.Generator().manual_seed(run.seed)
    net = DenseNetwork.from_config(train.num_features, num_classes, config.model, generator=generator)

    optimizer = build_optimizer(net, config.sgd)
    state = TrainingState(
        optimizer=optimizer,
        scheduler=build_scheduler(optimizer, config.sgd),
        rng=np.random.default_rng(run.seed),
        num_workers=run.num_workers,
        reduction_shards=run.reduction_shards,
        fixed_round_to=RoundTo.from_bits(run.oracle_bits) if run.mode == "oracle" else None,
    )
    transfer = TransferBoundary(LinkModel(config.link.bandwidth, config.link.latency))
    awp = AwpController(net.num_layers, config.awp) if run.mode == "a2dtwp" else None

    callbacks = get_callbacks(config)
    for callback in callbacks:
        callback.on_train_begin(config)

    logger.info(
        f"*** Train *** mode={run.mode} layers={net.layer_sizes} workers={run.num_workers} "
        f"samples={len(train)}/{len(val)}"
    )
    loop_start = time.perf_counter()
    history = []
    for epoch in range(run.epochs):
        stats = train_epoch(net, train, config.sgd, transfer, awp, state, epoch=epoch)
        with state.timer.phase("validation"):
            stats.val_top1 = evaluate(net, torch.from_numpy(val.features), torch.from_numpy(val.labels))
        ledger = transfer.ledger
        stats.accounted_seconds = (
            sum(state.timer.totals.values()) + ledger.total_link_seconds() + ledger.total_codec_seconds()
        )
        history.append(stats)
        logger.info(
            f"epoch {epoch}: loss={stats.loss:.4f} val_top1={stats.val_top1:.4f} "
            f"bytes_sent={stats.bytes_sent} bits={stats.bits_per_layer}"
        )
        for callback in callbacks:
            callback.on_epoch_end(config, stats)

    loop_seconds = time.perf_counter() - loop_start

    wall_times = state.timer.as_dict()
    wall_times["adt_pack"] = sum(record.pack_seconds for record in transfer.ledger)
    wall_times["adt_unpack"] = sum(record.unpack_seconds for record in transfer.ledger)
    if run.mode == "baseline":
        # raw 32-bit transfers, no codec phases
        del wall_times["adt_pack"], wall_times["adt_unpack"]
    wall_times["loop"] = loop_seconds

    result = RunResult(net=net, epochs=history, ledger=transfer.ledger, awp=awp, wall_times=wall_times, summary={})
    result.summary = {
        "mode": run.mode,
        "oracle_bits": run.oracle_bits if run.mode == "oracle" else None,
        "seed": run.seed,
        "epochs": run.epochs,
        "num_batches": state.global_batch,
        "final_val_top1": result.final_val_top1,
        "final_loss": history[-1].loss,
        "final_bits_per_layer": history[-1].bits_per_layer,
        "weight_wire_bytes": result.weight_wire_bytes(),
        "weight_stream_ratio": transfer.ledger.weight_stream_ratio(),
        "total_wire_bytes": transfer.ledger.total_wire_bytes(),
    }
    for callback in callbacks:
        callback.on_train_end(config, result.summary)

    if output_dir is not None:
        write_run_outputs(result, config, output_dir)
    return result


def write_run_outputs(result: RunResult, config: RunConfig, output_dir) -> None:
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    wall_clock = config.run.wall_clock_in_csv

    metrics = pd.DataFrame(
        [
            [
                stats.epoch,
                stats.batch,
                stats.loss,
                stats.val_top1,
                stats.bytes_sent,
                stats.codec_seconds * 1000.0 if wall_clock else 0.0,
            ]
            for stats in result.epochs
        ],
        columns=METRICS_COLUMNS,
    )
    metrics.to_csv(output_dir / "metrics.csv", index=False)
    write_trace_csv(result.awp.trace if result.awp is not None else [], output_dir / "awp_trace.csv")
    result.ledger.write_csv(output_dir / "ledger.csv", wall_clock=wall_clock)

    with open(output_dir / "wall_times.json", "w", encoding="utf-8") as f:
        json.dump(result.wall_times, f, indent=2)
    report = profile_report(result.ledger, result.wall_times)
    (output_dir / "profile.txt").write_text(report.to_text() + "\n", encoding="utf-8")
    (output_dir / "profile.json").write_text(report.to_json() + "\n", encoding="utf-8")
    with open(output_dir / "summary.json", "w", encoding="utf-8") as f:
        json.dump(result.summary, f, indent=2)
    (output_dir / "config.yaml").write_text(config.to_yaml(), encoding="utf-8")
    logger.info(f"Run artifacts written to {output_dir}")


def load_run_outputs(run_dir) -> tuple[TransferLedger, dict[str, float]]:
    run_dir = Path(run_dir)
    ledger = TransferLedger.read_csv(run_dir / "ledger.csv")
    with open(run_dir / "wall_times.json", "r", encoding="utf-8") as f:
        wall_times = json.load(f)
    return ledger, wall_times


SWEEP_COLUMNS = ["bits", "final_val_top1", "reached_epoch", "accounted_seconds", "weight_wire_bytes"]


def oracle_sweep(
    config: RunConfig, bits: Sequence[int] = VALID_BITS, target_accuracy: Optional[float] = None
) -> tuple[pd.DataFrame, Optional[int]]:
    """Trains one fixed-precision run per width and picks the fastest one to reach the target accuracy.

    Runs are written to `<output_dir>/oracle_<bits>`. The selected width is the one with the smallest
    accounted time (modeled link plus measured compute) at the epoch the target was first reached,
    or `None` when no width reached it.
    """
    target = target_accuracy if target_accuracy is not None else config.run.target_accuracy
    if target is None:
        raise ValueError("oracle sweep needs a target accuracy")

    rows = []
    for width in bits:
        run_args = dataclasses.replace(
            config.run,
            mode="oracle",
            oracle_bits=width,
            target_accuracy=target,
            output_dir=str(Path(config.run.output_dir) / f"oracle_{width}"),
        )
        logger.info(f"*** Oracle sweep *** bits={width}")
        result = run_training(config.replace(run=run_args), output_dir=run_args.output_dir)
        reached = result.summary["time_to_accuracy"]
        rows.append(
            [
                width,
                result.final_val_top1,
                reached["epoch"],
                reached["accounted_seconds"],
                result.weight_wire_bytes(),
            ]
        )

    frame = pd.DataFrame(rows, columns=SWEEP_COLUMNS).astype({"reached_epoch": float, "accounted_seconds": float})
    reached = frame.dropna(subset=["reached_epoch"])
    selected = None if reached.empty else int(reached.loc[reached["accounted_seconds"].idxmin(), "bits"])
    if selected is None:
        logger.warning(f"No width reached validation accuracy {target}")
    else:
        logger.info(f"Oracle format: {selected} bits")
    return frame, selected
