"""Two-mode counting pipeline: map, sort, partition, reduce, merge.

VISITOR mode keys pairs by badge category and sums the room numbers
recorded for that category.  ROOM mode keys pairs by room and counts
occurrences.  Segments carry a CRC-64 checksum over their canonical
text serialization so a reducer can prove it worked on exactly the
pairs the leader dispatched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from crowdmw.domain import (
    CountMode,
    KeyValuePair,
    MiddlewareError,
    SensorReading,
    TagCategory,
    room_key,
)

NodeId = int


class NoClients(MiddlewareError):
    """Partitioning requires at least one client node."""


class ChecksumMismatch(MiddlewareError):
    """Segment content does not match its checksum."""


class ModeMismatch(MiddlewareError):
    """Partial results from different counting modes cannot merge."""


# ---------------------------------------------------------------------------
# CRC-64, ECMA-182 polynomial, most-significant-bit first, zero init.
# ---------------------------------------------------------------------------

_CRC64_POLY = 0x42F0E1EBA9EA3693
_MASK64 = (1 << 64) - 1


def _build_crc_table() -> tuple[int, ...]:
    table = []
    for byte in range(256):
        crc = byte << 56
        for _ in range(8):
            if crc & (1 << 63):
                crc = ((crc << 1) ^ _CRC64_POLY) & _MASK64
            else:
                crc = (crc << 1) & _MASK64
        table.append(crc)
    return tuple(table)


_CRC_TABLE = _build_crc_table()


def crc64(data: bytes) -> int:
    """CRC-64 over raw bytes (ECMA polynomial, no reflection)."""
    crc = 0
    for b in data:
        crc = (_CRC_TABLE[((crc >> 56) ^ b) & 0xFF] ^ (crc << 8)) & _MASK64
    return crc


# ---------------------------------------------------------------------------
# Canonical pair serialization: "key=value" joined by commas.
# ---------------------------------------------------------------------------


def serialize_pairs(pairs: Iterable[KeyValuePair]) -> str:
    """Canonical text form of a pair list, whitespace-free."""
    return ",".join(f"{p.key}={p.value}" for p in pairs)


def parse_pairs(text: str) -> list[KeyValuePair]:
    """Inverse of serialize_pairs; tolerates surrounding whitespace."""
    stripped = text.strip()
    if not stripped:
        return []
    pairs = []
    for item in stripped.split(","):
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"malformed pair entry: {item!r}")
        pairs.append(KeyValuePair(key.strip(), int(value.strip())))
    return pairs


def checksum_pairs(pairs: Iterable[KeyValuePair]) -> int:
    return crc64(serialize_pairs(pairs).encode("utf-8"))


def verify_pairs_text(text: str, claimed_checksum: int) -> list[KeyValuePair]:
    """Checksum-then-parse for pair text received off the wire.

    The checksum is computed over the raw text before parsing, so any
    corrupted byte fails here rather than producing garbage pairs.
    """
    if crc64(text.strip().encode("utf-8")) != claimed_checksum:
        raise ChecksumMismatch("serialized segment does not match checksum")
    return parse_pairs(text)


# ---------------------------------------------------------------------------
# Pipeline value types.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    """Contiguous slice of the consolidated pair list for one reducer."""

    assignee: NodeId
    pairs: tuple[KeyValuePair, ...]
    segment_index: int
    checksum: int

    @classmethod
    def build(cls, assignee: NodeId, pairs: Sequence[KeyValuePair],
              segment_index: int) -> "Segment":
        pairs = tuple(pairs)
        return cls(assignee, pairs, segment_index, checksum_pairs(pairs))


def _valid_key_for_mode(key: str, mode: CountMode) -> bool:
    if mode is CountMode.VISITOR:
        return key in {t.value for t in TagCategory}
    return key.startswith("Room")


@dataclass(frozen=True)
class PartialResult:
    """One reducer's aggregate map for one segment."""

    assignee: NodeId
    mode: CountMode
    aggregates: Mapping[str, int]
    input_pair_count: int

    def __post_init__(self) -> None:
        for key, count in self.aggregates.items():
            if not _valid_key_for_mode(key, self.mode):
                raise ValueError(f"key {key!r} invalid for mode {self.mode.value}")
            if count < 0:
                raise ValueError(f"negative aggregate for {key!r}")
        if self.input_pair_count < 0:
            raise ValueError("input_pair_count must be >= 0")


@dataclass(frozen=True)
class CycleResult:
    """Merged output of one completed cycle, ready to commit."""

    cycle_id: int
    visitor_aggregates: Mapping[TagCategory, int] = field(default_factory=dict)
    room_aggregates: Mapping[int, int] = field(default_factory=dict)
    total_readings: int = 0

    def __post_init__(self) -> None:
        if self.cycle_id < 0:
            raise ValueError("cycle_id must be >= 0")
        if self.total_readings < 0:
            raise ValueError("total_readings must be >= 0")
        for count in self.visitor_aggregates.values():
            if count < 0:
                raise ValueError("negative visitor aggregate")
        for count in self.room_aggregates.values():
            if count < 0:
                raise ValueError("negative room aggregate")
        # Room mode counts occurrences, so when it ran its counts must
        # add up to the number of readings in the cycle.
        if self.room_aggregates:
            if sum(self.room_aggregates.values()) != self.total_readings:
                raise ValueError("room aggregates do not sum to total_readings")


# ---------------------------------------------------------------------------
# Pipeline stages.
# ---------------------------------------------------------------------------


def map_reading(reading: SensorReading, mode: CountMode) -> KeyValuePair:
    """Map one reading to its counting pair for the given mode."""
    if mode is CountMode.VISITOR:
        return KeyValuePair(reading.tag.value, reading.room)
    return KeyValuePair(room_key(reading.room), 1)


def sort_pairs(pairs: Iterable[KeyValuePair]) -> list[KeyValuePair]:
    """Ascending, stable sort under the canonical pair order."""
    return sorted(pairs, key=lambda p: (p.key, p.value))


def _is_sorted(pairs: Sequence[KeyValuePair]) -> bool:
    return all(
        (a.key, a.value) <= (b.key, b.value) for a, b in zip(pairs, pairs[1:])
    )


def partition(pairs: Sequence[KeyValuePair],
              clients: Iterable[NodeId]) -> list[Segment]:
    """Split a sorted pair list into contiguous per-client segments.

    Clients are ordered by ascending node id.  Sizes differ by at most
    one, with the remainder going to the lowest ids, so 16 pairs over
    three clients split 6/5/5.
    """
    client_ids = sorted(set(clients))
    if not client_ids:
        raise NoClients("cannot partition without clients")
    if not _is_sorted(pairs):
        raise ValueError("partition input must be sorted")
    total = len(pairs)
    base, remainder = divmod(total, len(client_ids))
    segments = []
    start = 0
    for index, client in enumerate(client_ids):
        size = base + (1 if index < remainder else 0)
        segments.append(Segment.build(client, pairs[start:start + size], index))
        start += size
    return segments


def reduce_segment(segment: Segment, mode: CountMode) -> PartialResult:
    """Sum values per key after proving the segment arrived intact."""
    if checksum_pairs(segment.pairs) != segment.checksum:
        raise ChecksumMismatch(
            f"segment {segment.segment_index} failed checksum verification"
        )
    aggregates: dict[str, int] = {}
    for pair in segment.pairs:
        aggregates[pair.key] = aggregates.get(pair.key, 0) + pair.value
    return PartialResult(
        assignee=segment.assignee,
        mode=mode,
        aggregates=aggregates,
        input_pair_count=len(segment.pairs),
    )


def merge_partials(partials: Sequence[PartialResult],
                   mode: CountMode) -> tuple[dict[str, int], int]:
    """Pointwise-sum partials; returns (aggregates, input pair total)."""
    merged: dict[str, int] = {}
    total_pairs = 0
    for partial in partials:
        if partial.mode is not mode:
            raise ModeMismatch(
                f"cannot merge {partial.mode.value} partial in {mode.value} merge"
            )
        for key, count in partial.aggregates.items():
            merged[key] = merged.get(key, 0) + count
        total_pairs += partial.input_pair_count
    return merged, total_pairs


def derive_room_segment(segment: Segment) -> Segment:
    """Re-key a visitor segment by room so one dispatch covers both modes.

    A visitor pair (tag, room) carries the full reading, so the room
    pair (RoomN, 1) is derivable locally by the reducer.
    """
    room_pairs = sort_pairs(
        KeyValuePair(room_key(p.value), 1) for p in segment.pairs
    )
    return Segment.build(segment.assignee, room_pairs, segment.segment_index)


def sequential_oracle(readings: Iterable[SensorReading],
                      mode: CountMode) -> dict[str, int]:
    """Single-pass reference count, bypassing the distributed pipeline."""
    totals: dict[str, int] = {}
    for reading in readings:
        pair = map_reading(reading, mode)
        totals[pair.key] = totals.get(pair.key, 0) + pair.value
    return totals
