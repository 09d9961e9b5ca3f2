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

"""Simulated host/worker boundary.

Every byte moving between the master weights and the worker copies goes through a `TransferBoundary`,
which appends one `TransferRecord` per message to a `TransferLedger`. Link time is modeled from a
`LinkModel`; pack and unpack times are measured.
"""

import enum
import json
import logging
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .codec import PackedBlock, RoundTo, pack_vectorized, unpack


logger = logging.getLogger(__name__)

LEDGER_COLUMNS = ["batch", "direction", "layer", "kind", "raw_bytes", "wire_bytes", "pack_s", "unpack_s", "link_s"]

# (key, label) in report order
PHASES = [
    ("transfer_to_worker", "Data transfer host->worker"),
    ("transfer_to_host", "Data transfer worker->host"),
    ("forward", "Forward"),
    ("backward", "Backward"),
    ("update", "Gradient update"),
    ("awp_norm", "AWP (l2-norm)"),
    ("adt_pack", "ADT (Bitpack)"),
    ("adt_unpack", "ADT (Bitunpack)"),
]

# measured loop time outside the phases above, listed under the table
MEASURED_EXTRAS = [
    ("batching", "Batch assembly"),
    ("boundary", "Boundary copies"),
    ("validation", "Validation"),
]


class EmptyLedger(ValueError):
    pass


class Direction(str, enum.Enum):
    TO_WORKER = "to_worker"
    TO_HOST = "to_host"


class PayloadKind(str, enum.Enum):
    WEIGHTS = "weights"
    BIASES = "biases"
    GRADIENTS = "gradients"


@dataclass(frozen=True)
class LinkModel:
    """Bandwidth in bytes/s and a fixed per-message latency in seconds."""

    bandwidth: float
    latency: float = 0.0

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")
        if self.latency < 0:
            raise ValueError(f"latency must be non-negative, got {self.latency}")

    def seconds(self, wire_bytes: int) -> float:
        return self.latency + wire_bytes / self.bandwidth


@dataclass(frozen=True)
class TransferRecord:
    batch: int
    direction: Direction
    layer: Optional[int]
    kind: PayloadKind
    raw_bytes: int
    wire_bytes: int
    pack_seconds: float
    unpack_seconds: float
    modeled_link_seconds: float

    def as_row(self, wall_clock: bool = True) -> list:
        return [
            self.batch,
            self.direction.value,
            "all" if self.layer is None else self.layer,
            self.kind.value,
            self.raw_bytes,
            self.wire_bytes,
            self.pack_seconds if wall_clock else 0.0,
            self.unpack_seconds if wall_clock else 0.0,
            self.modeled_link_seconds,
        ]


class TransferLedger:
    """Append-only list of transfer records; safe to append from several threads."""

    def __init__(self, records: Sequence[TransferRecord] = ()):
        self._records: list[TransferRecord] = list(records)
        self._lock = threading.Lock()

    def append(self, record: TransferRecord) -> None:
        with self._lock:
            self._records.append(record)

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[TransferRecord]:
        return iter(tuple(self._records))

    @property
    def records(self) -> tuple[TransferRecord, ...]:
        return tuple(self._records)

    def select(
        self,
        direction: Optional[Direction] = None,
        kind: Optional[PayloadKind] = None,
        batch: Optional[int] = None,
    ) -> list[TransferRecord]:
        return [
            record
            for record in self._records
            if (direction is None or record.direction == direction)
            and (kind is None or record.kind == kind)
            and (batch is None or record.batch == batch)
        ]

    def total_wire_bytes(self, **filters) -> int:
        return sum(record.wire_bytes for record in self.select(**filters))

    def total_raw_bytes(self, **filters) -> int:
        return sum(record.raw_bytes for record in self.select(**filters))

    def total_link_seconds(self, **filters) -> float:
        return sum(record.modeled_link_seconds for record in self.select(**filters))

    def total_codec_seconds(self, **filters) -> float:
        return sum(record.pack_seconds + record.unpack_seconds for record in self.select(**filters))

    def batches(self) -> list[int]:
        return sorted({record.batch for record in self._records})

    def weight_stream_ratio(self) -> float:
        """Raw over wire bytes of the host->worker weight stream."""
        wire = self.total_wire_bytes(direction=Direction.TO_WORKER, kind=PayloadKind.WEIGHTS)
        if wire == 0:
            raise EmptyLedger("no weight transfers recorded")
        return self.total_raw_bytes(direction=Direction.TO_WORKER, kind=PayloadKind.WEIGHTS) / wire

    def to_frame(self, wall_clock: bool = True) -> pd.DataFrame:
        return pd.DataFrame([record.as_row(wall_clock) for record in self._records], columns=LEDGER_COLUMNS)

    def write_csv(self, path, wall_clock: bool = True) -> None:
        self.to_frame(wall_clock).to_csv(path, index=False)

    @classmethod
    def read_csv(cls, path) -> "TransferLedger":
        frame = pd.read_csv(path, dtype={"layer": str}, float_precision="round_trip")
        missing = [column for column in LEDGER_COLUMNS if column not in frame.columns]
        if missing:
            raise ValueError(f"{path}: ledger CSV is missing columns {missing}")
        records = [
            TransferRecord(
                batch=int(row.batch),
                direction=Direction(row.direction),
                layer=None if row.layer == "all" else int(row.layer),
                kind=PayloadKind(row.kind),
                raw_bytes=int(row.raw_bytes),
                wire_bytes=int(row.wire_bytes),
                pack_seconds=float(row.pack_s),
                unpack_seconds=float(row.unpack_s),
                modeled_link_seconds=float(row.link_s),
            )
            for row in frame.itertuples(index=False)
        ]
        return cls(records)


def send_weights(
    block: PackedBlock,
    link: LinkModel,
    ledger: TransferLedger,
    batch: int = 0,
    layer: Optional[int] = None,
    pack_seconds: float = 0.0,
    unpack_seconds: float = 0.0,
) -> tuple[PackedBlock, TransferRecord]:
    """Moves a packed block across the boundary; the block arrives unchanged."""
    wire_bytes = block.wire_bytes
    record = TransferRecord(
        batch=batch,
        direction=Direction.TO_WORKER,
        layer=layer,
        kind=PayloadKind.WEIGHTS,
        raw_bytes=block.raw_bytes,
        wire_bytes=wire_bytes,
        pack_seconds=pack_seconds,
        unpack_seconds=unpack_seconds,
        modeled_link_seconds=link.seconds(wire_bytes),
    )
    ledger.append(record)
    return block, record


def send_raw(
    array: np.ndarray,
    link: LinkModel,
    ledger: TransferLedger,
    direction: Direction,
    kind: PayloadKind,
    batch: int = 0,
    layer: Optional[int] = None,
) -> tuple[np.ndarray, TransferRecord]:
    """Moves an uncompressed array across the boundary (biases, gradients, 32-bit baseline weights)."""
    received = np.array(array, copy=True)
    record = TransferRecord(
        batch=batch,
        direction=direction,
        layer=layer,
        kind=kind,
        raw_bytes=received.nbytes,
        wire_bytes=received.nbytes,
        pack_seconds=0.0,
        unpack_seconds=0.0,
        modeled_link_seconds=link.seconds(received.nbytes),
    )
    ledger.append(record)
    return received, record


class TransferBoundary:
    """The only path between master parameters and worker copies.

    `push_weights` packs a layer once, ships it to every worker and unpacks one copy per worker;
    passing `round_to=None` ships raw 32-bit words with no codec involved.
    """

    def __init__(self, link: LinkModel, ledger: Optional[TransferLedger] = None):
        self.link = link
        self.ledger = ledger if ledger is not None else TransferLedger()
        # measured pack + unpack seconds over the boundary's lifetime
        self.codec_seconds = 0.0

    def push_weights(
        self, weights: np.ndarray, round_to: Optional[RoundTo], batch: int, layer: int, num_workers: int
    ) -> list[np.ndarray]:
        shape = weights.shape
        if round_to is None:
            return [
                send_raw(weights, self.link, self.ledger, Direction.TO_WORKER, PayloadKind.WEIGHTS, batch, layer)[0]
                for _ in range(num_workers)
            ]

        start = time.perf_counter()
        block = pack_vectorized(weights, round_to)
        pack_seconds = time.perf_counter() - start
        self.codec_seconds += pack_seconds

        copies = []
        for worker in range(num_workers):
            start = time.perf_counter()
            restored = unpack(block).reshape(shape)
            unpack_seconds = time.perf_counter() - start
            self.codec_seconds += unpack_seconds
            send_weights(
                block,
                self.link,
                self.ledger,
                batch=batch,
                layer=layer,
                # the block is packed once, its cost is booked on the first message
                pack_seconds=pack_seconds if worker == 0 else 0.0,
                unpack_seconds=unpack_seconds,
            )
            copies.append(restored)
        return copies

    def push_biases(self, biases: np.ndarray, batch: int, layer: int, num_workers: int) -> list[np.ndarray]:
        return [
            send_raw(biases, self.link, self.ledger, Direction.TO_WORKER, PayloadKind.BIASES, batch, layer)[0]
            for _ in range(num_workers)
        ]

    def pull_gradients(self, gradients: Sequence[np.ndarray], batch: int) -> list[np.ndarray]:
        """Returns one worker's gradient arrays to the host, booked as a single message."""
        parts = [np.asarray(g, dtype=np.float32).reshape(-1) for g in gradients]
        flat = np.concatenate(parts) if parts else np.empty(0, dtype=np.float32)
        send_raw(flat, self.link, self.ledger, Direction.TO_HOST, PayloadKind.GRADIENTS, batch, None)
        return [np.array(g, copy=True) for g in gradients]


################
# Profile report
################


@dataclass
class ProfileRow:
    phase: str
    label: str
    seconds: Optional[float]
    per_batch_ms: Optional[float]
    baseline_seconds: Optional[float] = None
    baseline_per_batch_ms: Optional[float] = None


@dataclass
class ProfileReport:
    rows: list[ProfileRow]
    num_batches: int
    accounted_seconds: float
    weight_stream_ratio: float
    weight_wire_bytes: int
    baseline_num_batches: Optional[int] = None
    baseline_accounted_seconds: Optional[float] = None
    baseline_weight_wire_bytes: Optional[int] = None
    # measured wall seconds: the whole batch loop, and the part of it covered by a measured phase
    loop_seconds: Optional[float] = None
    measured_seconds: float = 0.0
    extras: dict[str, float] = field(default_factory=dict)

    @property
    def unattributed_seconds(self) -> Optional[float]:
        if self.loop_seconds is None:
            return None
        return self.loop_seconds - self.measured_seconds

    @property
    def has_baseline(self) -> bool:
        return self.baseline_num_batches is not None

    def phase_seconds(self, phase: str) -> Optional[float]:
        for row in self.rows:
            if row.phase == phase:
                return row.seconds
        raise KeyError(phase)

    def to_dict(self) -> dict:
        return {
            "num_batches": self.num_batches,
            "accounted_seconds": self.accounted_seconds,
            "weight_stream_ratio": self.weight_stream_ratio,
            "weight_wire_bytes": self.weight_wire_bytes,
            "baseline_num_batches": self.baseline_num_batches,
            "baseline_accounted_seconds": self.baseline_accounted_seconds,
            "baseline_weight_wire_bytes": self.baseline_weight_wire_bytes,
            "loop_seconds": self.loop_seconds,
            "measured_seconds": self.measured_seconds,
            "unattributed_seconds": self.unattributed_seconds,
            "extras": dict(self.extras),
            "phases": [asdict(row) for row in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        def fmt(value: Optional[float]) -> str:
            return "N/A" if value is None else f"{value:.3f}"

        header = ["Phase", "run total ms", "run ms/batch"]
        if self.has_baseline:
            header += ["baseline total ms", "baseline ms/batch"]
        table = [header]
        for row in self.rows:
            line = [row.label, fmt(_ms(row.seconds)), fmt(row.per_batch_ms)]
            if self.has_baseline:
                line += [fmt(_ms(row.baseline_seconds)), fmt(row.baseline_per_batch_ms)]
            table.append(line)
        total_ms = _ms(self.accounted_seconds)
        total = ["Total (accounted)", fmt(total_ms), fmt(total_ms / self.num_batches)]
        if self.has_baseline:
            total += [
                fmt(_ms(self.baseline_accounted_seconds)),
                fmt(_ms(self.baseline_accounted_seconds) / self.baseline_num_batches),
            ]
        table.append(total)

        widths = [max(len(line[i]) for line in table) for i in range(len(header))]
        lines = [
            "  ".join(cell.ljust(widths[i]) if i == 0 else cell.rjust(widths[i]) for i, cell in enumerate(line))
            for line in table
        ]
        lines.insert(1, "-" * len(lines[0]))
        lines.append("")
        lines.append(f"Weight stream raw/wire ratio: {self.weight_stream_ratio:.4f}")
        if self.has_baseline and self.baseline_weight_wire_bytes:
            lines.append(
                f"Weight wire bytes vs baseline: {self.weight_wire_bytes} / {self.baseline_weight_wire_bytes} "
                f"({self.weight_wire_bytes / self.baseline_weight_wire_bytes:.2%})"
            )
        for phase, label in MEASURED_EXTRAS:
            if phase in self.extras:
                lines.append(f"{label}: {fmt(_ms(self.extras[phase]))} ms")
        if self.loop_seconds:
            lines.append(
                f"Measured loop: {fmt(_ms(self.loop_seconds))} ms, "
                f"attributed {fmt(_ms(self.measured_seconds))} ms "
                f"({self.measured_seconds / self.loop_seconds:.2%}), "
                f"unattributed {fmt(_ms(self.unattributed_seconds))} ms"
            )
        return "\n".join(lines)


def _ms(seconds: Optional[float]) -> Optional[float]:
    return None if seconds is None else seconds * 1000.0


def _phase_totals(ledger: TransferLedger, wall_times: Mapping[str, float]) -> dict[str, Optional[float]]:
    totals: dict[str, Optional[float]] = {
        "transfer_to_worker": ledger.total_link_seconds(direction=Direction.TO_WORKER),
        "transfer_to_host": ledger.total_link_seconds(direction=Direction.TO_HOST),
    }
    ledger_codec = {}
    if any(record.pack_seconds or record.unpack_seconds for record in ledger):
        ledger_codec = {
            "adt_pack": sum(record.pack_seconds for record in ledger),
            "adt_unpack": sum(record.unpack_seconds for record in ledger),
        }
    for phase, _ in PHASES[2:]:
        if phase in wall_times:
            totals[phase] = float(wall_times[phase])
        elif phase in ledger_codec:
            totals[phase] = ledger_codec[phase]
        else:
            totals[phase] = None
    return totals


def profile_report(
    ledger: TransferLedger,
    wall_times: Mapping[str, float],
    baseline: Optional[tuple[TransferLedger, Mapping[str, float]]] = None,
) -> ProfileReport:
    """Per-phase breakdown of a run, optionally side by side with a baseline run.

    Phases a run never executed (e.g. AWP in a baseline run) are reported as N/A. When `wall_times`
    carries the measured `loop` time, the measured phases are reconciled against it and whatever
    they miss is reported as unattributed.
    """
    if len(ledger) == 0:
        raise EmptyLedger("cannot profile a run with an empty ledger")
    totals = _phase_totals(ledger, wall_times)
    num_batches = len(ledger.batches())

    baseline_totals: dict[str, Optional[float]] = {}
    baseline_batches = None
    if baseline is not None:
        baseline_ledger, baseline_wall = baseline
        if len(baseline_ledger) == 0:
            raise EmptyLedger("cannot profile against a baseline with an empty ledger")
        baseline_totals = _phase_totals(baseline_ledger, baseline_wall)
        baseline_batches = len(baseline_ledger.batches())

    rows = []
    for phase, label in PHASES:
        seconds = totals[phase]
        baseline_seconds = baseline_totals.get(phase)
        rows.append(
            ProfileRow(
                phase=phase,
                label=label,
                seconds=seconds,
                per_batch_ms=None if seconds is None else seconds * 1000.0 / num_batches,
                baseline_seconds=baseline_seconds,
                baseline_per_batch_ms=(
                    None
                    if baseline_seconds is None or not baseline_batches
                    else baseline_seconds * 1000.0 / baseline_batches
                ),
            )
        )

    extras = {phase: float(wall_times[phase]) for phase, _ in MEASURED_EXTRAS if phase in wall_times}
    measured_phases = [totals[phase] for phase, _ in PHASES[2:] if totals[phase] is not None]
    weight_filters = dict(direction=Direction.TO_WORKER, kind=PayloadKind.WEIGHTS)
    report = ProfileReport(
        rows=rows,
        num_batches=num_batches,
        accounted_seconds=sum(value for value in totals.values() if value is not None),
        weight_stream_ratio=ledger.weight_stream_ratio(),
        weight_wire_bytes=ledger.total_wire_bytes(**weight_filters),
        loop_seconds=float(wall_times["loop"]) if "loop" in wall_times else None,
        measured_seconds=sum(measured_phases) + sum(extras.values()),
        extras=extras,
    )
    if baseline is not None:
        report.baseline_num_batches = baseline_batches
        report.baseline_accounted_seconds = sum(value for value in baseline_totals.values() if value is not None)
        report.baseline_weight_wire_bytes = baseline[0].total_wire_bytes(**weight_filters)
    return report
