"""Seeded visitor stream generator and replayable fixtures.

Models badge-wearing visitors walking a small set of rooms: each
visitor gets a category from the tag mix, enters at a random time,
then random-walks rooms (never re-entering the room just left) with a
uniform dwell per room.  Readers fire on entry only.  At a small rate
the paired doorway antenna double-reads a pass; those extra readings
are flagged in the ledger so downstream dedupe can be verified
exactly.  Everything is a pure function of the model, so one seed
always yields one stream.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Iterator

from crowdmw.domain import (
    CountMode,
    MiddlewareError,
    SensorReading,
    TagCategory,
)
from crowdmw.mapreduce import parse_pairs, sequential_oracle


class UnknownFixture(MiddlewareError):
    """No fixture ships under that name."""


@dataclass
class VisitorModel:
    """Knobs for stream generation; defaults match the deployment."""

    seed: int
    visitor_count: int
    tag_mix: tuple[float, float, float] = (0.4, 0.5, 0.1)
    rooms: int = 4
    dwell_ms: tuple[int, int] = (100, 400)
    double_read_rate: float = 0.02

    def __post_init__(self) -> None:
        if self.visitor_count < 0:
            raise ValueError("visitor_count must be >= 0")
        if self.rooms < 1:
            raise ValueError("rooms must be >= 1")
        if abs(sum(self.tag_mix) - 1.0) > 1e-9:
            raise ValueError(f"tag_mix must sum to 1, got {self.tag_mix}")
        if any(p < 0 for p in self.tag_mix):
            raise ValueError("tag_mix probabilities must be >= 0")
        low, high = self.dwell_ms
        if low < 1 or high < low:
            raise ValueError(f"bad dwell range {self.dwell_ms}")
        if not 0.0 <= self.double_read_rate <= 1.0:
            raise ValueError("double_read_rate outside [0, 1]")


# Tag categories in mix order: man, woman, other.
_MIX_ORDER = (TagCategory.MAN, TagCategory.WOMAN, TagCategory.OTHER)


@dataclass(frozen=True)
class LedgerEntry:
    """Ground truth for one generated reading."""

    sequence: int
    tag: TagCategory
    room: int
    timestamp: int
    reader_id: int
    is_duplicate: bool

    def to_reading(self) -> SensorReading:
        return SensorReading(tag=self.tag, room=self.room,
                             timestamp=self.timestamp,
                             reader_id=self.reader_id)


@dataclass
class GenerationLedger:
    """Every generated reading, duplicates flagged, sequences dense."""

    entries: list[LedgerEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[LedgerEntry]:
        return iter(self.entries)

    def non_duplicates(self) -> list[LedgerEntry]:
        return [e for e in self.entries if not e.is_duplicate]

    def expected_counts(self, mode: CountMode) -> dict[str, int]:
        """Oracle totals over the deduplicated stream."""
        return sequential_oracle(
            (e.to_reading() for e in self.non_duplicates()), mode
        )

    def tag_proportions(self) -> dict[TagCategory, float]:
        readings = self.non_duplicates()
        if not readings:
            return {tag: 0.0 for tag in _MIX_ORDER}
        return {
            tag: sum(1 for e in readings if e.tag is tag) / len(readings)
            for tag in _MIX_ORDER
        }


def _draw_tag(rng: random.Random, mix: tuple[float, float, float]) -> TagCategory:
    roll = rng.random()
    cumulative = 0.0
    for tag, probability in zip(_MIX_ORDER, mix):
        cumulative += probability
        if roll < cumulative:
            return tag
    return _MIX_ORDER[-1]


def generate_stream(model: VisitorModel,
                    duration_ms: int) -> tuple[list[SensorReading],
                                               GenerationLedger]:
    """Generate the reading stream and its ground-truth ledger.

    Returned readings and ledger entries are index-aligned.  Distinct
    visits never collide on (tag, room, timestamp); only an injected
    double read shares all three with its original, which is exactly
    the collision collection-side dedupe collapses.
    """
    if duration_ms < 1:
        raise ValueError("duration_ms must be >= 1")
    rng = random.Random(model.seed)
    used_slots: set[tuple[TagCategory, int, int]] = set()
    raw: list[tuple[int, int, int, TagCategory, int, int, bool]] = []
    # Tuple layout: (timestamp, visitor, ordinal, tag, room, reader, dup).

    for visitor in range(model.visitor_count):
        tag = _draw_tag(rng, model.tag_mix)
        at = rng.uniform(0, duration_ms)
        walk_length = rng.randint(1, 2 * model.rooms)
        room = 0
        ordinal = 0
        for _ in range(walk_length):
            if at >= duration_ms:
                break
            choices = [r for r in range(1, model.rooms + 1) if r != room]
            room = rng.choice(choices)
            timestamp = int(at)
            while (tag, room, timestamp) in used_slots:
                timestamp += 1
            used_slots.add((tag, room, timestamp))
            reader = 2 * room
            raw.append((timestamp, visitor, ordinal, tag, room, reader, False))
            ordinal += 1
            if rng.random() < model.double_read_rate:
                raw.append((timestamp, visitor, ordinal, tag, room,
                            reader + 1, True))
                ordinal += 1
            at += rng.uniform(*model.dwell_ms)

    raw.sort(key=lambda item: item[:3])
    ledger = GenerationLedger()
    readings = []
    for sequence, (timestamp, _visitor, _ordinal, tag, room, reader,
                   dup) in enumerate(raw):
        entry = LedgerEntry(sequence=sequence, tag=tag, room=room,
                            timestamp=timestamp, reader_id=reader,
                            is_duplicate=dup)
        ledger.entries.append(entry)
        readings.append(entry.to_reading())
    return readings, ledger


def dedupe_readings(readings: Iterable[SensorReading]) -> list[SensorReading]:
    """Collapse paired-reader double reads: same tag, room, timestamp."""
    seen: set[tuple[TagCategory, int, int]] = set()
    kept = []
    for reading in readings:
        slot = (reading.tag, reading.room, reading.timestamp)
        if slot in seen:
            continue
        seen.add(slot)
        kept.append(reading)
    return kept


# ---------------------------------------------------------------------------
# Fixtures: canonical pair text shipped with the package.
# ---------------------------------------------------------------------------

_FIXTURE_SPACING_MS = 10


def list_fixtures() -> list[str]:
    names = []
    for item in resources.files("crowdmw.fixtures").iterdir():
        if item.name.endswith(".txt"):
            names.append(item.name[:-4])
    return sorted(names)


def replay_fixture(name: str) -> list[SensorReading]:
    """Load a named fixture as a reading stream.

    Fixture files hold one canonical pair line, e.g. ``man=1,woman=3``;
    timestamps are synthesized at a fixed spacing in file order.
    """
    try:
        text = (resources.files("crowdmw.fixtures") / f"{name}.txt").read_text(
            encoding="utf-8"
        )
    except (FileNotFoundError, OSError):
        raise UnknownFixture(f"no fixture named {name!r}") from None
    pairs = parse_pairs(text)
    readings = []
    for index, pair in enumerate(pairs):
        tag = None
        for candidate in TagCategory:
            if candidate.value == pair.key:
                tag = candidate
                break
        if tag is None:
            raise ValueError(
                f"fixture {name!r} holds non-visitor key {pair.key!r}"
            )
        readings.append(SensorReading(tag=tag, room=pair.value,
                                      timestamp=index * _FIXTURE_SPACING_MS))
    return readings
