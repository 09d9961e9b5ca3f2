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

"""Adaptive weight precision controller.

Tracks the relative change of every layer's l2-norm from batch to batch. Each batch whose change rate
falls below the threshold `T` bumps the layer's interval counter; once the counter reaches `interval`
the layer's width grows by `step_bits` (clamped to 32) and the counter restarts.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from .codec import RoundTo, bits_to_round_to
from .configs import AwpConfig


logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["batch", "layer", "norm", "delta", "counter", "bits"]


class UnknownLayer(IndexError):
    pass


def l2_norm(weights) -> float:
    """sqrt(sum(w^2)) accumulated in float64."""
    values = np.asarray(weights, dtype=np.float64).reshape(-1)
    if values.size == 0:
        return 0.0
    return float(np.sqrt(np.dot(values, values)))


def change_rate(curr_norm: float, prev_norm: float) -> float:
    """(curr - prev) / prev, with 0 for a 0 -> 0 step and +inf when growing from a zero norm."""
    if prev_norm > 0:
        return (curr_norm - prev_norm) / prev_norm
    return 0.0 if curr_norm == 0 else math.inf


@dataclass
class LayerPrecisionState:
    bits: int
    interval_counter: int = 0
    prev_norm: Optional[float] = None

    @property
    def round_to(self) -> RoundTo:
        return RoundTo.from_bits(self.bits)


@dataclass(frozen=True)
class AwpTraceRow:
    batch: int
    layer: int
    norm: float
    delta: float
    counter: int
    bits: int


@dataclass
class AwpController:
    """Per-unit precision state machine.

    A unit is a layer, or a group of layers when `config.layer_groups` is set. `observe_batch` and
    `current_round_to` take layer indices; grouped layers share one state.
    """

    num_layers: int
    config: AwpConfig = field(default_factory=AwpConfig)
    trace: list[AwpTraceRow] = field(default_factory=list)

    def __post_init__(self):
        if self.num_layers < 0:
            raise ValueError(f"num_layers must be non-negative, got {self.num_layers}")
        groups = self.config.layer_groups
        if groups is None:
            self._unit_of_layer = list(range(self.num_layers))
        else:
            if len(groups) != self.num_layers:
                raise ValueError(f"layer_groups has {len(groups)} entries for {self.num_layers} layers")
            # renumber groups in order of first appearance
            unit_ids: dict[int, int] = {}
            self._unit_of_layer = [unit_ids.setdefault(group, len(unit_ids)) for group in groups]
        num_units = len(set(self._unit_of_layer))
        self.states = [LayerPrecisionState(bits=self.config.initial_bits) for _ in range(num_units)]

    @property
    def num_units(self) -> int:
        return len(self.states)

    def unit_of(self, layer: int) -> int:
        if isinstance(layer, bool) or not 0 <= layer < self.num_layers:
            raise UnknownLayer(f"layer {layer} out of range for {self.num_layers} layers")
        return self._unit_of_layer[layer]

    def layers_of(self, unit: int) -> list[int]:
        return [layer for layer, owner in enumerate(self._unit_of_layer) if owner == unit]

    def state(self, layer: int) -> LayerPrecisionState:
        return self.states[self.unit_of(layer)]

    def observe_batch(self, layer: int, curr_norm: float, batch: Optional[int] = None) -> int:
        """Feeds one post-update norm for `layer` and returns its (possibly widened) bit count.

        With `batch` set, one trace row is recorded for every layer sharing `layer`'s unit.
        """
        unit = self.unit_of(layer)
        state = self.states[unit]
        cfg = self.config

        delta = math.nan
        if state.prev_norm is not None:
            delta = change_rate(curr_norm, state.prev_norm)
            if delta < cfg.threshold:
                state.interval_counter += 1
            elif cfg.consecutive:
                state.interval_counter = 0
            if state.interval_counter >= cfg.interval:
                widened = min(state.bits + cfg.step_bits, cfg.max_bits)
                if widened != state.bits:
                    logger.info(
                        f"Layer {layer} widened from {state.bits} to {widened} bits"
                        + (f" at batch {batch}" if batch is not None else "")
                    )
                state.bits = widened
                state.interval_counter = 0
        state.prev_norm = float(curr_norm)

        if batch is not None:
            self.trace.extend(
                AwpTraceRow(
                    batch=batch,
                    layer=member,
                    norm=float(curr_norm),
                    delta=delta,
                    counter=state.interval_counter,
                    bits=state.bits,
                )
                for member in self.layers_of(unit)
            )
        return state.bits

    def observe_norms(self, norms: Sequence[float], batch: Optional[int] = None) -> list[int]:
        """Observes one batch worth of per-layer norms, folding grouped layers into a single norm."""
        if len(norms) != self.num_layers:
            raise ValueError(f"expected {self.num_layers} norms, got {len(norms)}")
        for unit in range(self.num_units):
            layers = self.layers_of(unit)
            if len(layers) == 1:
                unit_norm = float(norms[layers[0]])
            else:
                unit_norm = math.sqrt(sum(norms[layer] ** 2 for layer in layers))
            self.observe_batch(layers[0], unit_norm, batch=batch)
        return self.bits_per_layer()

    def current_round_to(self, layer: int) -> RoundTo:
        return RoundTo(bits_to_round_to(self.state(layer).bits))

    def bits_per_layer(self) -> list[int]:
        return [self.states[unit].bits for unit in self._unit_of_layer]


def write_trace_csv(rows: Iterable[AwpTraceRow], path) -> None:
    pd.DataFrame([asdict(row) for row in rows], columns=TRACE_COLUMNS).to_csv(path, index=False)


def read_trace_csv(path) -> list[AwpTraceRow]:
    frame = pd.read_csv(path, float_precision="round_trip")
    missing = [column for column in TRACE_COLUMNS if column not in frame.columns]
    if missing:
        raise ValueError(f"{path}: trace CSV is missing columns {missing}")
    return [
        AwpTraceRow(int(row.batch), int(row.layer), float(row.norm), float(row.delta), int(row.counter), int(row.bits))
        for row in frame.itertuples(index=False)
    ]


def widening_events(rows: Iterable[AwpTraceRow]) -> dict[int, list[tuple[int, int]]]:
    """Per layer, the `(batch, bits)` of every width change found in a trace."""
    events: dict[int, list[tuple[int, int]]] = {}
    last_bits: dict[int, int] = {}
    for row in rows:
        events.setdefault(row.layer, [])
        if row.layer in last_bits and row.bits != last_bits[row.layer]:
            events[row.layer].append((row.batch, row.bits))
        last_bits[row.layer] = row.bits
    return events
