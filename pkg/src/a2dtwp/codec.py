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

"""Byte-granularity truncation codec for 32-bit float weight arrays.

Each weight keeps its `round_to` most-significant bytes on the wire, stored most-significant-first
regardless of host byte order. Unpacking zero-fills the discarded low bytes.

Three pack paths are provided and are byte-identical for every input:

- `pack`: the reference path (one big-endian view, keep the leading columns).
- `pack_vectorized`: groups of 8 weights run through an emulation of the 256-bit register dataflow
  (in-lane byte shuffle, cross-lane 32-bit permute, masked store), with a scalar tail.
- `pack_parallel`: contiguous chunks at weight boundaries, one disjoint output span per worker thread.
"""

import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import BinaryIO, Union

import numpy as np


logger = logging.getLogger(__name__)

WORD_BYTES = 4
GROUP_SIZE = 8
LANE_BYTES = 16

CONTAINER_MAGIC = b"ADT1"
CONTAINER_VERSION = 1
# magic, version, round_to, weight_count (u64 little-endian)
_HEADER = struct.Struct("<4sBBQ")
HEADER_BYTES = _HEADER.size


class InvalidRoundTo(ValueError):
    pass


class MalformedBlock(ValueError):
    """Raised when a packed payload or container is inconsistent with its framing."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


@dataclass(frozen=True)
class RoundTo:
    """Number of most-significant bytes kept per weight."""

    bytes_kept: int

    def __post_init__(self):
        if isinstance(self.bytes_kept, bool) or not isinstance(self.bytes_kept, (int, np.integer)):
            raise InvalidRoundTo(f"round_to must be an integer, got {self.bytes_kept!r}")
        if not 1 <= self.bytes_kept <= WORD_BYTES:
            raise InvalidRoundTo(f"round_to must be in 1..{WORD_BYTES}, got {self.bytes_kept}")
        object.__setattr__(self, "bytes_kept", int(self.bytes_kept))

    def __int__(self) -> int:
        return self.bytes_kept

    @classmethod
    def from_bits(cls, bits: int) -> "RoundTo":
        return cls(bits_to_round_to(bits))


RoundToLike = Union[RoundTo, int]


def as_round_to(round_to: RoundToLike) -> RoundTo:
    return round_to if isinstance(round_to, RoundTo) else RoundTo(round_to)


def bits_to_round_to(bits: int) -> int:
    """Smallest byte count that holds `bits` bits, e.g. 14 -> 2."""
    if bits < 1 or bits > WORD_BYTES * 8:
        raise InvalidRoundTo(f"bit width must be in 1..{WORD_BYTES * 8}, got {bits}")
    return math.ceil(bits / 8)


def truncation_mask(round_to: RoundToLike) -> int:
    """High mask with `8 * round_to` one-bits, e.g. 3 -> 0xFFFFFF00."""
    r = as_round_to(round_to).bytes_kept
    return (0xFFFFFFFF << ((WORD_BYTES - r) * 8)) & 0xFFFFFFFF


@dataclass(frozen=True)
class PackedBlock:
    """A compressed weight payload plus the framing needed to restore it."""

    round_to: RoundTo
    weight_count: int
    payload: bytes

    @property
    def expected_payload_bytes(self) -> int:
        return self.weight_count * self.round_to.bytes_kept

    @property
    def raw_bytes(self) -> int:
        return self.weight_count * WORD_BYTES

    @property
    def wire_bytes(self) -> int:
        return HEADER_BYTES + len(self.payload)

    def is_well_formed(self) -> bool:
        return self.weight_count >= 0 and len(self.payload) == self.expected_payload_bytes


def _as_words(weights) -> np.ndarray:
    """Flatten `weights` into native-order uint32 words without touching the bit patterns."""
    array = np.asarray(weights)
    if array.dtype == np.float32 or array.dtype == np.uint32:
        return np.ascontiguousarray(array.reshape(-1)).view(np.uint32)
    if array.size == 0:
        return np.empty(0, dtype=np.uint32)
    # other dtypes go through a value conversion first
    return np.ascontiguousarray(array.reshape(-1), dtype=np.float32).view(np.uint32)


def _pack_words_into(words: np.ndarray, r: int, out: np.ndarray) -> None:
    """Reference kernel: write the `r` leading big-endian bytes of every word into `out`."""
    if words.size == 0:
        return
    big_endian = words.astype(">u4", copy=False).view(np.uint8).reshape(-1, WORD_BYTES)
    out.reshape(-1, r)[:] = big_endian[:, :r]


def pack(weights, round_to: RoundToLike) -> PackedBlock:
    r = as_round_to(round_to)
    words = _as_words(weights)
    out = np.empty(words.size * r.bytes_kept, dtype=np.uint8)
    _pack_words_into(words, r.bytes_kept, out)
    return PackedBlock(round_to=r, weight_count=int(words.size), payload=out.tobytes())


##################################
# Register-level dataflow emulation
##################################


def _lane_shuffle_control(r: int) -> np.ndarray:
    """Control bytes of the in-lane shuffle for one 128-bit lane of 4 little-endian words.

    Output byte `k` of a lane holds byte `control[k]` of the same lane, or zero when the
    control byte has its high bit set. Kept bytes are emitted most-significant-first.
    """
    control = np.full(LANE_BYTES, 0x80, dtype=np.uint8)
    position = 0
    for word in range(LANE_BYTES // WORD_BYTES):
        for byte in range(r):
            control[position] = word * WORD_BYTES + (WORD_BYTES - 1 - byte)
            position += 1
    return control


def _cross_lane_permute(r: int) -> np.ndarray:
    """32-bit permute indices that move the valid dwords of both lanes to the front."""
    valid = [*range(r), *range(4, 4 + r)]
    filler = [index for index in range(GROUP_SIZE) if index not in valid]
    return np.asarray(valid + filler, dtype=np.intp)


def _shuffle_within_lanes(group_bytes: np.ndarray, control: np.ndarray) -> np.ndarray:
    """Emulates a per-lane byte shuffle over (groups, 32) byte rows."""
    lanes = group_bytes.reshape(-1, 2, LANE_BYTES)
    zeroed = control & 0x80 != 0
    shuffled = np.take(lanes, (control & 0x0F).astype(np.intp), axis=2)
    shuffled[:, :, zeroed] = 0
    return shuffled.reshape(-1, GROUP_SIZE * WORD_BYTES)


def _vector_kernel(words: np.ndarray, r: int, out: np.ndarray) -> None:
    """Packs `words` (a multiple of GROUP_SIZE) group by group into `out`."""
    groups = words.size // GROUP_SIZE
    if groups == 0:
        return
    # load: 8 words per 256-bit register, host byte order is little-endian in the lanes
    registers = words.astype("<u4", copy=False).view(np.uint8).reshape(groups, GROUP_SIZE * WORD_BYTES)
    compacted = _shuffle_within_lanes(registers, _lane_shuffle_control(r))
    dwords = np.ascontiguousarray(compacted).view(np.uint32).reshape(groups, GROUP_SIZE)
    permuted = np.ascontiguousarray(np.take(dwords, _cross_lane_permute(r), axis=1))
    # masked store of the leading 8 * r bytes of each register
    stored = permuted.view(np.uint8).reshape(groups, GROUP_SIZE * WORD_BYTES)[:, : GROUP_SIZE * r]
    out.reshape(groups, GROUP_SIZE * r)[:] = stored


def _cpu_features() -> dict:
    try:
        from numpy._core._multiarray_umath import __cpu_features__
    except ImportError:
        try:
            from numpy.core._multiarray_umath import __cpu_features__
        except ImportError:
            return {}
    return __cpu_features__


def vector_backend() -> str | None:
    """Name of the byte-shuffle-capable vector extension reported for this host, if any."""
    features = _cpu_features()
    for name in ("AVX2", "ASIMD", "NEON", "VSX"):
        if features.get(name):
            return name
    return None


def _pack_vectorized_into(words: np.ndarray, r: int, out: np.ndarray) -> None:
    head = words.size - words.size % GROUP_SIZE
    _vector_kernel(words[:head], r, out[: head * r])
    # scalar tail
    _pack_words_into(words[head:], r, out[head * r :])


def pack_vectorized(weights, round_to: RoundToLike) -> PackedBlock:
    r = as_round_to(round_to)
    if vector_backend() is None:
        logger.debug("No vector backend reported for this host, using the scalar pack path")
        return pack(weights, r)
    words = _as_words(weights)
    out = np.empty(words.size * r.bytes_kept, dtype=np.uint8)
    _pack_vectorized_into(words, r.bytes_kept, out)
    return PackedBlock(round_to=r, weight_count=int(words.size), payload=out.tobytes())


def chunk_bounds(weight_count: int, worker_count: int) -> list[tuple[int, int]]:
    """Contiguous, near-equal [start, stop) ranges covering `weight_count` weights."""
    if worker_count < 1:
        raise ValueError(f"worker_count must be positive, got {worker_count}")
    base, extra = divmod(weight_count, worker_count)
    bounds = []
    start = 0
    for worker in range(worker_count):
        stop = start + base + (1 if worker < extra else 0)
        bounds.append((start, stop))
        start = stop
    return bounds


def pack_parallel(weights, round_to: RoundToLike, worker_count: int, vectorized: bool = False) -> PackedBlock:
    r = as_round_to(round_to)
    words = _as_words(weights)
    bounds = chunk_bounds(words.size, worker_count)
    out = np.empty(words.size * r.bytes_kept, dtype=np.uint8)
    kernel = _pack_vectorized_into if vectorized and vector_backend() is not None else _pack_words_into

    def run_chunk(span: tuple[int, int]) -> None:
        start, stop = span
        kernel(words[start:stop], r.bytes_kept, out[start * r.bytes_kept : stop * r.bytes_kept])

    if worker_count == 1 or words.size == 0:
        for span in bounds:
            run_chunk(span)
    else:
        with ThreadPoolExecutor(max_workers=worker_count) as executor:
            # list() re-raises any worker exception
            list(executor.map(run_chunk, bounds))
    return PackedBlock(round_to=r, weight_count=int(words.size), payload=out.tobytes())


def unpack(block: PackedBlock) -> np.ndarray:
    """Restores float32 weights, zero-filling the discarded low bytes of every word."""
    if not block.is_well_formed():
        raise MalformedBlock(
            f"payload holds {len(block.payload)} bytes but {block.weight_count} weights at "
            f"round_to={block.round_to.bytes_kept} need {block.expected_payload_bytes}"
        )
    r = block.round_to.bytes_kept
    padded = np.zeros((block.weight_count, WORD_BYTES), dtype=np.uint8)
    padded[:, :r] = np.frombuffer(block.payload, dtype=np.uint8).reshape(block.weight_count, r)
    words = padded.view(">u4").reshape(block.weight_count).astype(np.uint32)
    return words.view(np.float32)


##############
# ADT1 container
##############


def encode_container(block: PackedBlock) -> bytes:
    header = _HEADER.pack(CONTAINER_MAGIC, CONTAINER_VERSION, block.round_to.bytes_kept, block.weight_count)
    return header + block.payload


def decode_container(data: bytes) -> PackedBlock:
    if len(data) < HEADER_BYTES:
        raise MalformedBlock(f"container is {len(data)} bytes, shorter than the {HEADER_BYTES}-byte header", len(data))
    magic, version, round_to, weight_count = _HEADER.unpack_from(data)
    if magic != CONTAINER_MAGIC:
        raise MalformedBlock(f"bad magic {magic!r}, expected {CONTAINER_MAGIC!r}", 0)
    if version != CONTAINER_VERSION:
        raise MalformedBlock(f"unsupported container version {version}", 4)
    try:
        r = RoundTo(round_to)
    except InvalidRoundTo as e:
        raise MalformedBlock(str(e), 5) from e
    payload = data[HEADER_BYTES:]
    expected = weight_count * r.bytes_kept
    if len(payload) < expected:
        raise MalformedBlock(
            f"payload truncated: {weight_count} weights at round_to={round_to} need {expected} bytes, "
            f"found {len(payload)}",
            len(data),
        )
    if len(payload) > expected:
        raise MalformedBlock(
            f"{len(payload) - expected} trailing bytes after a payload of {weight_count} weights",
            HEADER_BYTES + expected,
        )
    return PackedBlock(round_to=r, weight_count=weight_count, payload=bytes(payload))


def write_container(block: PackedBlock, stream: BinaryIO) -> int:
    data = encode_container(block)
    stream.write(data)
    return len(data)


def read_container(stream: BinaryIO) -> PackedBlock:
    return decode_container(stream.read())
