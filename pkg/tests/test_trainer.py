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

import dataclasses
import json
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
import torch
from parameterized import parameterized

from a2dtwp.awp import AwpController, widening_events
from a2dtwp.codec import HEADER_BYTES, RoundTo
from a2dtwp.configs import AwpConfig, DataConfig, ModelConfig, RunArguments, RunConfig, SgdConfig, load_run_config
from a2dtwp.model import DenseNetwork, build_optimizer
from a2dtwp.trainer import (
    METRICS_COLUMNS,
    SWEEP_COLUMNS,
    TrainingState,
    load_run_outputs,
    oracle_sweep,
    run_training,
    train_epoch,
)
from a2dtwp.transfer import PHASES, Direction, LinkModel, PayloadKind, TransferBoundary, profile_report
from a2dtwp.utils import make_blobs


RECIPES = Path(__file__).resolve().parents[1] / "configs" / "blobs"

SGD = SgdConfig(learning_rate=0.05, momentum=0.9, weight_decay=5e-4, batch_size=32)


def small_config(mode="a2dtwp", awp=None, **run_kwargs):
    run_kwargs.setdefault("seed", 0)
    run_kwargs.setdefault("epochs", 2)
    return RunConfig(
        data=DataConfig(num_samples=600, num_features=8, num_classes=3, blob_spread=4.0),
        model=ModelConfig(hidden_sizes=[16, 12]),
        sgd=SGD,
        awp=awp if awp is not None else AwpConfig(threshold=-1e-3, interval=3),
        run=RunArguments(mode=mode, **run_kwargs),
    )


# every observation after the first counts, so each layer widens every third batch
ALWAYS_WIDEN = AwpConfig(threshold=1.0, interval=3)


def fresh_net(seed=0):
    return DenseNetwork([8, 16, 12, 3], generator=torch.Generator().manual_seed(seed))


def fresh_state(net, seed=0, **kwargs):
    return TrainingState(optimizer=build_optimizer(net, SGD), rng=np.random.default_rng(seed), **kwargs)


def assert_same_parameters(test, first, second):
    for a, b in zip(first.parameters(), second.parameters()):
        test.assertTrue(torch.equal(a.detach(), b.detach()))


class TrainEpochTest(unittest.TestCase):
    def setUp(self):
        self.dataset = make_blobs(400, 8, 3, seed=1)

    def test_lossless_codec_is_transparent(self):
        plain_net, codec_net = fresh_net(), fresh_net()
        plain_state = fresh_state(plain_net)
        codec_state = fresh_state(codec_net, fixed_round_to=RoundTo(4))
        transfer = TransferBoundary(LinkModel(1e9))

        for epoch in range(3):
            plain = train_epoch(plain_net, self.dataset, SGD, None, None, plain_state, epoch=epoch)
            coded = train_epoch(codec_net, self.dataset, SGD, transfer, None, codec_state, epoch=epoch)
            self.assertEqual(plain.loss_curve, coded.loss_curve)
        assert_same_parameters(self, plain_net, codec_net)
        self.assertEqual(plain.bytes_sent, 0)
        self.assertGreater(coded.bytes_sent, 0)

    @parameterized.expand([(RoundTo(4),), (RoundTo(2),)])
    def test_worker_count_invariance(self, round_to):
        nets = {}
        for workers in (1, 2, 4):
            net = fresh_net()
            state = fresh_state(net, num_workers=workers, reduction_shards=4, fixed_round_to=round_to)
            transfer = TransferBoundary(LinkModel(1e9))
            for epoch in range(2):
                train_epoch(net, self.dataset, SGD, transfer, None, state, epoch=epoch)
            nets[workers] = net
        assert_same_parameters(self, nets[1], nets[2])
        assert_same_parameters(self, nets[1], nets[4])

    def test_truncation_changes_the_trajectory(self):
        full_net, truncated_net = fresh_net(), fresh_net()
        transfer = TransferBoundary(LinkModel(1e9))
        train_epoch(full_net, self.dataset, SGD, transfer, None, fresh_state(full_net, fixed_round_to=RoundTo(4)))
        train_epoch(
            truncated_net, self.dataset, SGD, transfer, None, fresh_state(truncated_net, fixed_round_to=RoundTo(1))
        )
        self.assertFalse(torch.equal(full_net.weights[0].detach(), truncated_net.weights[0].detach()))

    def test_every_batch_is_booked(self):
        net = fresh_net()
        state = fresh_state(net, num_workers=2, reduction_shards=4)
        awp = AwpController(net.num_layers, AwpConfig())
        transfer = TransferBoundary(LinkModel(1e9, 1e-6))
        stats = train_epoch(net, self.dataset, SGD, transfer, awp, state)

        num_batches = int(np.ceil(len(self.dataset) / SGD.batch_size))
        ledger = transfer.ledger
        self.assertEqual(stats.batch, num_batches)
        self.assertEqual(len(stats.loss_curve), num_batches)
        self.assertEqual(ledger.batches(), list(range(num_batches)))
        per_batch = net.num_layers * 2 * 2 + 2
        self.assertEqual(len(ledger), num_batches * per_batch)
        self.assertEqual(stats.bytes_sent, ledger.total_wire_bytes())
        self.assertEqual(len(ledger.select(direction=Direction.TO_HOST, kind=PayloadKind.GRADIENTS)), 2 * num_batches)
        self.assertEqual(len(awp.trace), num_batches * net.num_layers)
        self.assertEqual(stats.bits_per_layer, awp.bits_per_layer())

    def test_awp_sees_master_weight_norms(self):
        net = fresh_net()
        awp = AwpController(net.num_layers, AwpConfig())
        train_epoch(net, self.dataset, SGD, TransferBoundary(LinkModel(1e9)), awp, fresh_state(net))
        last_norm = awp.trace[-1].norm
        self.assertAlmostEqual(last_norm, float(torch.linalg.vector_norm(net.weights[-1].detach().double())))


class RunTrainingTest(unittest.TestCase):
    def test_requires_seed(self):
        with self.assertRaises(ValueError):
            run_training(small_config(seed=None))

    def test_baseline_equals_oracle_32(self):
        baseline = run_training(small_config("baseline"))
        oracle = run_training(small_config("oracle_fixed_bits(32)"))
        assert_same_parameters(self, baseline.net, oracle.net)
        self.assertEqual(
            [(s.loss, s.val_top1) for s in baseline.epochs], [(s.loss, s.val_top1) for s in oracle.epochs]
        )
        self.assertEqual(baseline.ledger.weight_stream_ratio(), 1.0)
        self.assertIsNone(baseline.awp)
        self.assertNotIn("adt_pack", baseline.wall_times)
        self.assertIn("adt_pack", oracle.wall_times)

    @parameterized.expand([("oracle",), ("a2dtwp",)])
    def test_worker_count_invariance(self, mode):
        results = [run_training(small_config(mode, num_workers=workers)) for workers in (1, 2, 4)]
        for other in results[1:]:
            assert_same_parameters(self, results[0].net, other.net)
            self.assertEqual(results[0].summary["final_val_top1"], other.summary["final_val_top1"])

    def test_a2dtwp_bits_never_decrease(self):
        result = run_training(small_config("a2dtwp", awp=ALWAYS_WIDEN, epochs=3))
        trace = pd.DataFrame([dataclasses.asdict(row) for row in result.awp.trace])
        for _, rows in trace.groupby("layer"):
            self.assertTrue(rows["bits"].is_monotonic_increasing)
            self.assertTrue((rows["bits"] <= 32).all())
            self.assertTrue((rows["bits"].diff() > 0).any())
        self.assertEqual(result.summary["final_bits_per_layer"], result.awp.bits_per_layer())

    def test_outputs_are_written(self):
        with tempfile.TemporaryDirectory() as tmp:
            result = run_training(small_config("a2dtwp"), output_dir=tmp)
            root = Path(tmp)
            for name in [
                "metrics.csv",
                "awp_trace.csv",
                "ledger.csv",
                "wall_times.json",
                "profile.txt",
                "profile.json",
                "summary.json",
                "config.yaml",
            ]:
                self.assertTrue((root / name).exists(), msg=name)

            metrics = pd.read_csv(root / "metrics.csv")
            self.assertEqual(list(metrics.columns), METRICS_COLUMNS)
            self.assertEqual(len(metrics), 2)
            self.assertTrue((metrics["codec_ms"] == 0).all())

            summary = json.loads((root / "summary.json").read_text())
            self.assertEqual(summary["mode"], "a2dtwp")
            self.assertEqual(summary["final_val_top1"], result.final_val_top1)

            ledger, wall_times = load_run_outputs(root)
            self.assertEqual(len(ledger), len(result.ledger))
            report = profile_report(ledger, wall_times)
            self.assertEqual([row.phase for row in report.rows], [phase for phase, _ in PHASES])
            self.assertTrue(all(row.seconds is not None for row in report.rows))
            self.assertEqual(report.loop_seconds, wall_times["loop"])
            self.assertEqual(sorted(report.extras), ["batching", "boundary", "validation"])

    def test_widening_reaches_the_wire(self):
        result = run_training(small_config("a2dtwp", awp=ALWAYS_WIDEN))
        num_layers = result.net.num_layers
        events = widening_events(result.awp.trace)
        self.assertEqual(events, {layer: [(3, 16), (6, 24), (9, 32)] for layer in range(num_layers)})

        # weights shipped for batch b use the width the controller held after batch b - 1
        bits_after = {(row.batch, row.layer): row.bits for row in result.awp.trace}
        wire_bytes = {layer: set() for layer in range(num_layers)}
        for record in result.ledger.select(direction=Direction.TO_WORKER, kind=PayloadKind.WEIGHTS):
            bits = bits_after.get((record.batch - 1, record.layer), 8)
            self.assertEqual(record.wire_bytes, HEADER_BYTES + record.raw_bytes // 4 * (bits // 8), msg=record)
            wire_bytes[record.layer].add(record.wire_bytes)
        for layer, sizes in wire_bytes.items():
            self.assertEqual(len(sizes), 4, msg=f"layer {layer}")
        self.assertGreater(result.ledger.weight_stream_ratio(), 1.0)
        self.assertLess(result.ledger.weight_stream_ratio(), 4.0)

    def test_measured_phases_cover_the_loop(self):
        config = small_config("a2dtwp", num_workers=2).replace(
            data=DataConfig(num_samples=1200, num_features=32, num_classes=4, blob_spread=4.0),
            model=ModelConfig(hidden_sizes=[128, 64]),
        )
        result = run_training(config)
        report = profile_report(result.ledger, result.wall_times)
        self.assertEqual(report.loop_seconds, result.wall_times["loop"])
        self.assertGreater(report.extras["boundary"], 0.0)
        self.assertGreater(report.extras["validation"], 0.0)
        self.assertGreaterEqual(report.unattributed_seconds, 0.0)
        self.assertLessEqual(report.unattributed_seconds, 0.05 * report.loop_seconds)

    def test_reruns_are_byte_identical(self):
        with tempfile.TemporaryDirectory() as first, tempfile.TemporaryDirectory() as second:
            run_training(small_config("a2dtwp", num_workers=2), output_dir=first)
            run_training(small_config("a2dtwp", num_workers=2), output_dir=second)
            for name in ["metrics.csv", "awp_trace.csv", "ledger.csv"]:
                self.assertEqual(
                    (Path(first) / name).read_bytes(), (Path(second) / name).read_bytes(), msg=name
                )

    def test_time_to_accuracy_in_summary(self):
        result = run_training(small_config("oracle", oracle_bits=16, target_accuracy=0.5))
        reached = result.summary["time_to_accuracy"]
        self.assertEqual(reached["target"], 0.5)
        self.assertIsNotNone(reached["epoch"])
        self.assertGreater(reached["accounted_seconds"], 0.0)

    def test_oracle_sweep(self):
        with tempfile.TemporaryDirectory() as tmp:
            config = small_config("oracle", output_dir=tmp)
            frame, selected = oracle_sweep(config, bits=[8, 32], target_accuracy=0.5)
            self.assertEqual(list(frame.columns), SWEEP_COLUMNS)
            self.assertEqual(frame["bits"].tolist(), [8, 32])
            self.assertIn(selected, [8, 32])
            self.assertTrue((Path(tmp) / "oracle_8" / "ledger.csv").exists())
            self.assertLess(frame.loc[0, "weight_wire_bytes"], frame.loc[1, "weight_wire_bytes"])

    def test_oracle_sweep_needs_target(self):
        with self.assertRaises(ValueError):
            oracle_sweep(small_config("oracle"), bits=[8])


@pytest.mark.slow
class ConvergenceTest(unittest.TestCase):
    def test_a2dtwp_matches_baseline_with_fewer_bytes(self):
        baseline = run_training(load_run_config(RECIPES / "baseline.yaml", ["--seed", "42"]))
        adaptive = run_training(load_run_config(RECIPES / "a2dtwp.yaml", ["--seed", "42"]))

        self.assertTrue(any(widening_events(adaptive.awp.trace).values()))
        self.assertLessEqual(abs(adaptive.final_val_top1 - baseline.final_val_top1), 0.02)
        self.assertLessEqual(adaptive.weight_wire_bytes(), 0.6 * baseline.weight_wire_bytes())


if __name__ == "__main__":
    unittest.main()
