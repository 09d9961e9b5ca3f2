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

import json
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pandas as pd
from parameterized import parameterized

from a2dtwp.awp import AwpController
from a2dtwp.codec import HEADER_BYTES, RoundTo, pack, unpack
from a2dtwp.configs import AwpConfig
from a2dtwp.transfer import (
    LEDGER_COLUMNS,
    MEASURED_EXTRAS,
    PHASES,
    Direction,
    EmptyLedger,
    LinkModel,
    PayloadKind,
    TransferBoundary,
    TransferLedger,
    profile_report,
    send_raw,
    send_weights,
)


def random_weights(shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape).astype(np.float32)


def replay_weight_ratio(csv_path):
    """Raw over wire bytes of the host->worker weight stream, recomputed from the ledger CSV."""
    frame = pd.read_csv(csv_path)
    weights = frame[(frame["direction"] == "to_worker") & (frame["kind"] == "weights")]
    return weights["raw_bytes"].sum() / weights["wire_bytes"].sum()


class LinkModelTest(unittest.TestCase):
    def test_seconds(self):
        self.assertAlmostEqual(LinkModel(bandwidth=1e9, latency=1e-5).seconds(1000), 1e-5 + 1e-6)

    @parameterized.expand([(0.0, 0.0), (-1.0, 0.0), (1e9, -1e-6)])
    def test_invalid(self, bandwidth, latency):
        with self.assertRaises(ValueError):
            LinkModel(bandwidth, latency)


class SendWeightsTest(unittest.TestCase):
    def test_thousand_weights_at_three_bytes(self):
        ledger = TransferLedger()
        block = pack(random_weights(1000), 3)
        received, record = send_weights(block, LinkModel(1e9, 0.0), ledger)
        self.assertIs(received, block)
        self.assertEqual(record.wire_bytes, 3000 + HEADER_BYTES)
        self.assertEqual(record.raw_bytes, 4000)
        self.assertAlmostEqual(record.modeled_link_seconds, 3.014e-6, delta=1e-12)
        self.assertEqual(list(ledger), [record])

    def test_link_time_scales_with_round_to(self):
        ledger = TransferLedger()
        link = LinkModel(1e9, 0.0)
        weights = random_weights(1000)
        _, full = send_weights(pack(weights, 4), link, ledger)
        _, one = send_weights(pack(weights, 1), link, ledger)
        self.assertAlmostEqual(
            full.modeled_link_seconds / one.modeled_link_seconds, (4000 + HEADER_BYTES) / (1000 + HEADER_BYTES)
        )

    def test_empty_layer_is_header_only(self):
        _, record = send_weights(pack(np.empty(0, dtype=np.float32), 2), LinkModel(1e9), TransferLedger())
        self.assertEqual(record.wire_bytes, HEADER_BYTES)
        self.assertEqual(record.raw_bytes, 0)

    def test_wire_bytes_increase_with_round_to(self):
        weights = random_weights(64)
        sizes = [pack(weights, r).wire_bytes for r in range(1, 5)]
        self.assertEqual(sizes, sorted(set(sizes)))

    def test_send_raw_copies(self):
        ledger = TransferLedger()
        array = random_weights(10)
        received, record = send_raw(array, LinkModel(1e9), ledger, Direction.TO_HOST, PayloadKind.GRADIENTS)
        np.testing.assert_array_equal(received, array)
        self.assertIsNot(received, array)
        self.assertEqual(record.wire_bytes, record.raw_bytes)
        self.assertEqual(record.wire_bytes, 40)


class TransferLedgerTest(unittest.TestCase):
    def test_empty_weight_stream(self):
        with self.assertRaises(EmptyLedger):
            TransferLedger().weight_stream_ratio()

    def test_totals_are_sums_of_parts(self):
        boundary = TransferBoundary(LinkModel(1e9, 1e-6))
        for batch in range(3):
            boundary.push_weights(random_weights((8, 4), seed=batch), RoundTo(2), batch, 0, num_workers=2)
            boundary.push_biases(random_weights(4), batch, 0, num_workers=2)
        ledger = boundary.ledger
        self.assertEqual(len(ledger), 12)
        self.assertEqual(ledger.batches(), [0, 1, 2])
        self.assertEqual(
            ledger.total_wire_bytes(),
            sum(ledger.total_wire_bytes(batch=batch) for batch in ledger.batches()),
        )
        self.assertEqual(ledger.total_wire_bytes(kind=PayloadKind.WEIGHTS), 6 * (HEADER_BYTES + 64))
        self.assertEqual(ledger.total_wire_bytes(kind=PayloadKind.BIASES), 6 * 16)

    def test_csv_roundtrip_and_columns(self):
        boundary = TransferBoundary(LinkModel(1e9))
        boundary.push_weights(random_weights((5, 3)), RoundTo(1), 0, 1, num_workers=1)
        boundary.pull_gradients([random_weights((5, 3)), random_weights(3)], batch=0)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "ledger.csv"
            boundary.ledger.write_csv(path)
            self.assertEqual(path.read_text().splitlines()[0], ",".join(LEDGER_COLUMNS))
            restored = TransferLedger.read_csv(path)
        self.assertEqual(restored.records, boundary.ledger.records)
        self.assertIsNone(restored.records[1].layer)

    def test_csv_without_wall_clock_zeroes_codec_times(self):
        boundary = TransferBoundary(LinkModel(1e9))
        boundary.push_weights(random_weights(1000), RoundTo(2), 0, 0, num_workers=2)
        frame = boundary.ledger.to_frame(wall_clock=False)
        self.assertTrue((frame["pack_s"] == 0).all())
        self.assertTrue((frame["unpack_s"] == 0).all())
        self.assertTrue((frame["link_s"] > 0).all())

    def test_csv_missing_columns(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "ledger.csv"
            path.write_text("batch,direction\n0,to_worker\n")
            with self.assertRaises(ValueError):
                TransferLedger.read_csv(path)


class TransferBoundaryTest(unittest.TestCase):
    def test_workers_receive_truncated_copies(self):
        boundary = TransferBoundary(LinkModel(1e9))
        master = random_weights((6, 5))
        before = master.copy()
        copies = boundary.push_weights(master, RoundTo(2), batch=4, layer=1, num_workers=3)
        expected = unpack(pack(master, 2)).reshape(6, 5)
        self.assertEqual(len(copies), 3)
        for copy in copies:
            np.testing.assert_array_equal(copy.view(np.uint32), expected.view(np.uint32))
        np.testing.assert_array_equal(master.view(np.uint32), before.view(np.uint32))

        records = boundary.ledger.records
        expected_keys = [(4, 1, Direction.TO_WORKER, PayloadKind.WEIGHTS)] * 3
        self.assertEqual([(r.batch, r.layer, r.direction, r.kind) for r in records], expected_keys)
        self.assertTrue(all(r.wire_bytes == HEADER_BYTES + 60 for r in records))
        self.assertTrue(all(r.pack_seconds == 0.0 for r in records[1:]))
        self.assertAlmostEqual(boundary.codec_seconds, boundary.ledger.total_codec_seconds())

    def test_raw_weights_skip_the_codec(self):
        boundary = TransferBoundary(LinkModel(1e9))
        master = random_weights((4, 4))
        copies = boundary.push_weights(master, None, batch=0, layer=0, num_workers=2)
        for copy in copies:
            np.testing.assert_array_equal(copy, master)
        for record in boundary.ledger:
            self.assertEqual(record.wire_bytes, 64)
            self.assertEqual(record.raw_bytes, 64)
            self.assertEqual(record.pack_seconds, 0.0)
        self.assertEqual(boundary.codec_seconds, 0.0)

    def test_gradients_are_one_message_per_call(self):
        boundary = TransferBoundary(LinkModel(1e9))
        grads = [random_weights((3, 2)), random_weights(2)]
        returned = boundary.pull_gradients(grads, batch=7)
        for got, sent in zip(returned, grads):
            np.testing.assert_array_equal(got, sent)
        (record,) = boundary.ledger.records
        self.assertEqual(record.direction, Direction.TO_HOST)
        self.assertEqual(record.kind, PayloadKind.GRADIENTS)
        self.assertEqual(record.wire_bytes, 32)
        self.assertEqual(record.batch, 7)


class WeightStreamRatioTest(unittest.TestCase):
    def push_layers(self, round_tos, size=100_000, batches=2):
        boundary = TransferBoundary(LinkModel(12e9, 1e-5))
        for batch in range(batches):
            for layer, r in enumerate(round_tos):
                boundary.push_weights(random_weights(size, seed=layer), r, batch, layer, num_workers=2)
        return boundary.ledger

    def test_lossless_ratio_is_one(self):
        ledger = self.push_layers([RoundTo(4)] * 3)
        self.assertAlmostEqual(ledger.weight_stream_ratio(), 1.0, delta=1e-3)

    def test_one_byte_ratio_is_four(self):
        ledger = self.push_layers([RoundTo(1)] * 3)
        self.assertAlmostEqual(ledger.weight_stream_ratio(), 4.0, delta=1e-2)

    def test_mixed_widths_match_ledger_replay(self):
        controller = AwpController(3, AwpConfig())
        for layer, bits in enumerate([8, 16, 24]):
            controller.state(layer).bits = bits
        ledger = self.push_layers([controller.current_round_to(layer) for layer in range(3)])
        ratio = ledger.weight_stream_ratio()
        self.assertGreater(ratio, 4 / 3)
        self.assertLess(ratio, 4.0)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "ledger.csv"
            ledger.write_csv(path, wall_clock=False)
            self.assertAlmostEqual(ratio, replay_weight_ratio(path))

    def test_near_three_fold_reduction(self):
        # layers at 8, 8 and 16 bits: 4/3 bytes per weight on average
        controller = AwpController(3, AwpConfig())
        controller.state(2).bits = 16
        round_tos = [controller.current_round_to(layer) for layer in range(3)]
        self.assertAlmostEqual(np.mean([r.bytes_kept for r in round_tos]), 4 / 3)
        ratio = self.push_layers(round_tos).weight_stream_ratio()
        self.assertGreaterEqual(ratio, 2.8)
        self.assertLessEqual(ratio, 3.2)


class ProfileReportTest(unittest.TestCase):
    def ledger(self, round_to):
        boundary = TransferBoundary(LinkModel(1e9, 1e-6))
        for batch in range(4):
            boundary.push_weights(random_weights(256), round_to, batch, 0, num_workers=2)
            boundary.push_biases(random_weights(16), batch, 0, num_workers=2)
            boundary.pull_gradients([random_weights(256), random_weights(16)], batch)
        return boundary.ledger

    def wall_times(self, **extra):
        times = {"forward": 0.4, "backward": 0.8, "update": 0.2}
        times.update(extra)
        return times

    def test_empty_ledger(self):
        with self.assertRaises(EmptyLedger):
            profile_report(TransferLedger(), {})

    def test_all_phases_present(self):
        ledger = self.ledger(RoundTo(2))
        report = profile_report(ledger, self.wall_times(awp_norm=0.05, adt_pack=0.01, adt_unpack=0.02))
        self.assertEqual([row.phase for row in report.rows], [phase for phase, _ in PHASES])
        self.assertIsNone(report.loop_seconds)
        self.assertIsNone(report.unattributed_seconds)
        self.assertEqual(report.num_batches, 4)
        self.assertAlmostEqual(report.phase_seconds("forward"), 0.4)
        self.assertAlmostEqual(report.rows[2].per_batch_ms, 100.0)
        self.assertAlmostEqual(
            report.phase_seconds("transfer_to_worker"), ledger.total_link_seconds(direction=Direction.TO_WORKER)
        )

    def test_measured_phases_reconciled_with_loop(self):
        ledger = self.ledger(RoundTo(2))
        wall_times = self.wall_times(awp_norm=0.05, adt_pack=0.01, adt_unpack=0.02, boundary=0.12, batching=0.02)
        wall_times.update(validation=0.1, loop=2.0)
        report = profile_report(ledger, wall_times)
        # modeled link time is not part of the measured loop
        self.assertAlmostEqual(report.measured_seconds, 1.72)
        self.assertAlmostEqual(report.unattributed_seconds, 0.28)
        self.assertEqual(report.extras, {"batching": 0.02, "boundary": 0.12, "validation": 0.1})
        text = report.to_text()
        for _, label in MEASURED_EXTRAS:
            self.assertIn(label, text)
        self.assertIn("unattributed 280.000 ms", text)
        payload = json.loads(report.to_json())
        self.assertAlmostEqual(payload["unattributed_seconds"], 0.28)
        self.assertAlmostEqual(payload["loop_seconds"], 2.0)

    def test_baseline_phases_not_run_are_na(self):
        report = profile_report(self.ledger(None), self.wall_times())
        self.assertIsNone(report.phase_seconds("awp_norm"))
        self.assertIsNone(report.phase_seconds("adt_pack"))
        self.assertIsNone(report.phase_seconds("adt_unpack"))
        self.assertIn("N/A", report.to_text())
        self.assertAlmostEqual(report.weight_stream_ratio, 1.0)

    def test_side_by_side_with_baseline(self):
        run = self.ledger(RoundTo(1))
        baseline = self.ledger(None)
        report = profile_report(run, self.wall_times(awp_norm=0.05), baseline=(baseline, self.wall_times()))
        self.assertTrue(report.has_baseline)
        self.assertEqual(report.baseline_num_batches, 4)
        self.assertEqual(report.weight_wire_bytes, 8 * (HEADER_BYTES + 256))
        self.assertEqual(report.baseline_weight_wire_bytes, 8 * 1024)
        text = report.to_text()
        for _, label in PHASES:
            self.assertIn(label, text)
        self.assertIn("baseline total ms", text)
        self.assertIn("Weight wire bytes vs baseline", text)

        payload = json.loads(report.to_json())
        self.assertEqual(len(payload["phases"]), len(PHASES))
        self.assertEqual(payload["baseline_weight_wire_bytes"], 8 * 1024)


if __name__ == "__main__":
    unittest.main()
