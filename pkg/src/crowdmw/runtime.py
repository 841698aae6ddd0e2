"""Per-node protocol state machine and the cycle pipeline.

Every node runs the same loop on an absolute slot grid: cycle k spans
[k*D, (k+1)*D) where D is the cycle duration.  Collection occupies the
slot up to D - W (W = the processing window); the remaining W covers
submission, dispatch, reduction, merge, commit and broadcast.  At each
slot boundary a node refreshes its registration, checks who should
lead (manual override if live, else the highest live id), verifies
that node with a PING round trip, and elects a replacement when the
check fails.  The leader is a logical client of itself: its own
readings enter consolidation like anyone else's.

Readings buffer locally with a per-node sequence number and leave the
buffer only when a CYCLE_SUCCESS acknowledges their sequence.  The
leader persists per-origin sequence watermarks inside each commit, so
resubmissions after lost acknowledgments or a leader change are
deduplicated against the store, never counted twice.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from crowdmw import election
from crowdmw.domain import (
    CountMode,
    KeyValuePair,
    MiddlewareError,
    SensorReading,
    TagCategory,
)
from crowdmw.election import Role
from crowdmw.mapreduce import (
    ChecksumMismatch,
    CycleResult,
    PartialResult,
    Segment,
    crc64,
    derive_room_segment,
    map_reading,
    merge_partials,
    parse_pairs,
    partition,
    reduce_segment,
    sort_pairs,
)
from crowdmw.simgen import dedupe_readings
from crowdmw.store import ConflictingCommit
from crowdmw.transport import (
    MAX_PAYLOAD,
    Message,
    MessageKind,
)

NodeId = int


class CycleAborted(MiddlewareError):
    """Cycle could not commit; buffers stay put for the next one."""


class IntegrityFailure(MiddlewareError):
    """Checksum or pair-count conservation failed after retries."""


class LeaderUnknown(MiddlewareError):
    """No confirmed leader to submit to."""


@dataclass
class CycleConfig:
    """Timing and participation knobs for the cycle protocol."""

    cycle_duration_ms: int = 2000
    mapreduce_window_ms: int = 500
    min_responding_nodes: int = 2
    retry_limit: int = 3
    ping_timeout_ms: int = 250
    ping_retries: int = 2

    def __post_init__(self) -> None:
        if self.cycle_duration_ms < 1:
            raise ValueError("cycle_duration_ms must be >= 1")
        if not 0 < self.mapreduce_window_ms < self.cycle_duration_ms:
            raise ValueError(
                "mapreduce_window_ms must fall inside the cycle duration"
            )
        if self.min_responding_nodes < 2:
            raise ValueError("min_responding_nodes must be >= 2")
        if self.retry_limit < 0:
            raise ValueError("retry_limit must be >= 0")
        if self.ping_timeout_ms < 1 or self.ping_retries < 1:
            raise ValueError("ping timeout and retries must be >= 1")

    # Derived schedule, all relative to the slot start.
    @property
    def collection_ms(self) -> int:
        return self.cycle_duration_ms - self.mapreduce_window_ms

    @property
    def submit_window_ms(self) -> int:
        return self.mapreduce_window_ms * 2 // 5

    @property
    def reduce_window_ms(self) -> int:
        return self.mapreduce_window_ms * 4 // 5

    @property
    def liveness_window_ms(self) -> int:
        # A record is live while seen within two check intervals.
        return 2 * self.cycle_duration_ms


class NodePhase(enum.Enum):
    REGISTERING = "registering"
    CHECKING_SERVER = "checking_server"
    ELECTING = "electing"
    COLLECTING = "collecting"
    SUBMITTING = "submitting"
    AWAITING_SEGMENT = "awaiting_segment"
    REDUCING = "reducing"
    AWAITING_RESULT = "awaiting_result"
    CONSOLIDATING = "consolidating"
    DISPATCHING = "dispatching"
    MERGING = "merging"
    COMMITTING = "committing"
    BROADCASTING = "broadcasting"


_P = NodePhase
PHASE_EDGES: dict[NodePhase, frozenset[NodePhase]] = {
    _P.REGISTERING: frozenset({_P.CHECKING_SERVER}),
    _P.CHECKING_SERVER: frozenset(
        {_P.CHECKING_SERVER, _P.ELECTING, _P.COLLECTING}
    ),
    _P.ELECTING: frozenset({_P.COLLECTING, _P.CHECKING_SERVER}),
    _P.COLLECTING: frozenset({_P.SUBMITTING, _P.CHECKING_SERVER}),
    _P.SUBMITTING: frozenset(
        {_P.AWAITING_SEGMENT, _P.CONSOLIDATING, _P.CHECKING_SERVER}
    ),
    _P.AWAITING_SEGMENT: frozenset({_P.REDUCING, _P.CHECKING_SERVER}),
    _P.REDUCING: frozenset({_P.AWAITING_RESULT, _P.CHECKING_SERVER}),
    _P.AWAITING_RESULT: frozenset({_P.CHECKING_SERVER}),
    _P.CONSOLIDATING: frozenset(
        {_P.DISPATCHING, _P.BROADCASTING, _P.CHECKING_SERVER}
    ),
    _P.DISPATCHING: frozenset({_P.MERGING, _P.CHECKING_SERVER}),
    _P.MERGING: frozenset(
        {_P.COMMITTING, _P.BROADCASTING, _P.CHECKING_SERVER}
    ),
    _P.COMMITTING: frozenset({_P.BROADCASTING, _P.CHECKING_SERVER}),
    _P.BROADCASTING: frozenset({_P.CHECKING_SERVER}),
}


# ---------------------------------------------------------------------------
# Client-side reading buffer.
# ---------------------------------------------------------------------------


@dataclass
class ClientBuffer:
    """Readings awaiting a committed cycle, tagged with sequences."""

    pending: list[tuple[int, SensorReading]] = field(default_factory=list)
    next_seq: int = 0
    committed_through: int = -1

    def __len__(self) -> int:
        return len(self.pending)

    def ingest(self, readings: Iterable[SensorReading]
               ) -> list[tuple[int, SensorReading]]:
        """Append deduplicated readings, assigning dense sequences."""
        added = []
        for reading in dedupe_readings(readings):
            added.append((self.next_seq, reading))
            self.next_seq += 1
        self.pending.extend(added)
        return added

    def entries(self) -> list[tuple[KeyValuePair, int]]:
        """Pending readings as sorted visitor pairs with sequences."""
        mapped = [
            (map_reading(reading, CountMode.VISITOR), seq)
            for seq, reading in self.pending
        ]
        mapped.sort(key=lambda item: (item[0].key, item[0].value, item[1]))
        return mapped

    def prune_through(self, seq: int) -> int:
        """Drop readings covered by a committed watermark."""
        if seq <= self.committed_through:
            return 0
        before = len(self.pending)
        self.pending = [(s, r) for s, r in self.pending if s > seq]
        self.committed_through = seq
        return before - len(self.pending)


class ListReadingSource:
    """Reading source backed by a pre-routed (time, reading) list."""

    def __init__(self, timed: Iterable[tuple[float, SensorReading]]) -> None:
        self._timed = sorted(timed, key=lambda item: item[0])
        self._cursor = 0

    def take_due(self, now_ms: float) -> list[SensorReading]:
        due = []
        while (self._cursor < len(self._timed)
               and self._timed[self._cursor][0] <= now_ms):
            due.append(self._timed[self._cursor][1])
            self._cursor += 1
        return due

    def remaining(self) -> list[tuple[float, SensorReading]]:
        return list(self._timed[self._cursor:])

    def injected_count(self) -> int:
        return len(self._timed)


# ---------------------------------------------------------------------------
# Wire payload grammar (text, field=value separated by ';').
# ---------------------------------------------------------------------------


def _entry_text(pair: KeyValuePair, seq: int) -> str:
    return f"{pair.key}={pair.value}@{seq}"


def _parse_entries(text: str) -> list[tuple[KeyValuePair, int]]:
    if not text:
        return []
    entries = []
    for item in text.split(","):
        body, at, seq = item.rpartition("@")
        if not at:
            raise ValueError(f"entry without sequence: {item!r}")
        key, eq, value = body.partition("=")
        if not eq:
            raise ValueError(f"malformed entry: {item!r}")
        entries.append((KeyValuePair(key, int(value)), int(seq)))
    return entries


def _parse_fields(payload: bytes) -> dict[str, str]:
    fields: dict[str, str] = {}
    for chunk in payload.decode("utf-8").split(";"):
        name, sep, value = chunk.partition("=")
        if not sep:
            raise ValueError(f"malformed payload field: {chunk!r}")
        fields[name] = value
    return fields


def _chunk(items: Sequence[str], budget: int,
           max_items: Optional[int]) -> list[list[str]]:
    """Greedy split so each part's joined text fits the byte budget."""
    if not items:
        return [[]]
    parts: list[list[str]] = [[]]
    used = 0
    for item in items:
        cost = len(item) + (1 if parts[-1] else 0)
        full = max_items is not None and len(parts[-1]) >= max_items
        if parts[-1] and (used + cost > budget or full):
            parts.append([])
            used = 0
            cost = len(item)
        parts[-1].append(item)
        used += cost
    return parts


def build_submission_parts(origin: NodeId, cycle_id: int,
                           entries: Sequence[tuple[KeyValuePair, int]],
                           max_entries_per_part: Optional[int] = None
                           ) -> list[Message]:
    """Encode a submission, split so every datagram stays legal."""
    texts = [_entry_text(pair, seq) for pair, seq in entries]
    headroom = len(f"origin={origin};part=9999/9999;entries=")
    chunks = _chunk(texts, MAX_PAYLOAD - headroom, max_entries_per_part)
    messages = []
    for index, chunk in enumerate(chunks):
        payload = (
            f"origin={origin};part={index}/{len(chunks)};"
            f"entries={','.join(chunk)}"
        )
        messages.append(Message(kind=MessageKind.DATA_SUBMIT, sender=origin,
                                cycle_id=cycle_id,
                                payload=payload.encode("utf-8")))
    return messages


def build_assignment_parts(sender: NodeId, cycle_id: int,
                           segment: Segment) -> list[Message]:
    pair_texts = [f"{p.key}={p.value}" for p in segment.pairs]
    headroom = len(
        f"segment={segment.segment_index};count={len(segment.pairs)};"
        f"checksum={'0' * 16};part=9999/9999;pairs="
    )
    chunks = _chunk(pair_texts, MAX_PAYLOAD - headroom, None)
    messages = []
    for index, chunk in enumerate(chunks):
        payload = (
            f"segment={segment.segment_index};count={len(segment.pairs)};"
            f"checksum={segment.checksum:016x};part={index}/{len(chunks)};"
            f"pairs={','.join(chunk)}"
        )
        messages.append(Message(kind=MessageKind.SEGMENT_ASSIGN,
                                sender=sender, cycle_id=cycle_id,
                                payload=payload.encode("utf-8")))
    return messages


def _serialize_aggregates(aggregates: dict[str, int]) -> str:
    return ",".join(f"{k}:{aggregates[k]}" for k in sorted(aggregates))


def _parse_aggregates(text: str) -> dict[str, int]:
    if not text:
        return {}
    out: dict[str, int] = {}
    for item in text.split(","):
        key, sep, count = item.partition(":")
        if not sep:
            raise ValueError(f"malformed aggregate: {item!r}")
        out[key] = int(count)
    return out


def build_reduce_result(sender: NodeId, cycle_id: int, segment_index: int,
                        segment_checksum: int,
                        visitor: dict[str, int], room: dict[str, int],
                        input_pair_count: int) -> Message:
    body = (
        f"segment={segment_index};count={input_pair_count};"
        f"checksum={segment_checksum:016x};"
        f"visitor={_serialize_aggregates(visitor)};"
        f"room={_serialize_aggregates(room)}"
    )
    digest = crc64(body.encode("utf-8"))
    payload = f"{body};digest={digest:016x}"
    return Message(kind=MessageKind.REDUCE_RESULT, sender=sender,
                   cycle_id=cycle_id, payload=payload.encode("utf-8"))


def parse_reduce_result(message: Message) -> Optional[dict]:
    """Validate a REDUCE_RESULT payload; None if malformed or corrupt."""
    try:
        text = message.payload.decode("utf-8")
        body, sep, digest_field = text.rpartition(";digest=")
        if not sep or crc64(body.encode("utf-8")) != int(digest_field, 16):
            return None
        fields = _parse_fields(body.encode("utf-8"))
        return {
            "segment": int(fields["segment"]),
            "count": int(fields["count"]),
            "checksum": int(fields["checksum"], 16),
            "visitor": _parse_aggregates(fields["visitor"]),
            "room": _parse_aggregates(fields["room"]),
        }
    except (ValueError, KeyError, UnicodeDecodeError):
        return None


def build_success(sender: NodeId, cycle_id: int,
                  acks: dict[NodeId, int]) -> Message:
    text = ",".join(f"{origin}:{acks[origin]}" for origin in sorted(acks))
    return Message(kind=MessageKind.CYCLE_SUCCESS, sender=sender,
                   cycle_id=cycle_id,
                   payload=f"acks={text}".encode("utf-8"))


def parse_success_acks(message: Message) -> dict[NodeId, int]:
    fields = _parse_fields(message.payload)
    acks: dict[NodeId, int] = {}
    raw = fields.get("acks", "")
    if raw:
        for item in raw.split(","):
            origin, sep, seq = item.partition(":")
            if not sep:
                raise ValueError(f"malformed ack: {item!r}")
            acks[int(origin)] = int(seq)
    return acks


# ---------------------------------------------------------------------------
# Pure cycle pipeline, also used by the live leader path.
# ---------------------------------------------------------------------------


def integrity_check(segments: Sequence[Segment],
                    partials: Sequence[PartialResult]) -> bool:
    """Conservation check: partial input counts cover the dispatch."""
    by_assignee = {s.assignee: s for s in segments}
    if len(by_assignee) != len(segments):
        return False
    seen: set[NodeId] = set()
    for partial in partials:
        segment = by_assignee.get(partial.assignee)
        if segment is None or partial.assignee in seen:
            return False
        seen.add(partial.assignee)
        if partial.input_pair_count != len(segment.pairs):
            return False
    if seen != set(by_assignee):
        return False
    total = sum(len(s.pairs) for s in segments)
    return sum(p.input_pair_count for p in partials) == total


def _reduce_both(segment: Segment) -> tuple[PartialResult, PartialResult]:
    """Reduce one visitor-keyed segment in both modes."""
    visitor = reduce_segment(segment, CountMode.VISITOR)
    room = reduce_segment(derive_room_segment(segment), CountMode.ROOM)
    room = PartialResult(assignee=room.assignee, mode=CountMode.ROOM,
                         aggregates=room.aggregates,
                         input_pair_count=visitor.input_pair_count)
    return visitor, room


def leader_cycle(submissions: Sequence[tuple[NodeId, Sequence[KeyValuePair]]],
                 *, cycle_id: int = 0, min_responding: int = 2,
                 modes: Sequence[CountMode] = (CountMode.VISITOR,
                                               CountMode.ROOM),
                 retry_limit: int = 3) -> CycleResult:
    """Run one full cycle pipeline over collected submissions.

    ``submissions`` holds one (origin, visitor pairs) entry per
    responding node; a node that sent no data still counts as
    responding with an empty list.  Raises CycleAborted when fewer than
    ``min_responding`` distinct nodes responded and IntegrityFailure
    when conservation cannot be established within the retry budget.
    """
    origins = {origin for origin, _ in submissions}
    if len(origins) < min_responding:
        raise CycleAborted(
            f"{len(origins)} responding nodes, need {min_responding}"
        )
    consolidated = sort_pairs(
        pair for _, pairs in submissions for pair in pairs
    )
    segments = partition(consolidated, origins)
    visitor_partials = []
    room_partials = []
    for attempt in range(max(1, retry_limit)):
        visitor_partials = []
        room_partials = []
        for segment in segments:
            visitor, room = _reduce_both(segment)
            visitor_partials.append(visitor)
            room_partials.append(room)
        if integrity_check(segments, visitor_partials):
            break
    else:
        raise IntegrityFailure("pair-count conservation failed")
    return _merge_cycle(cycle_id, len(consolidated), visitor_partials,
                        room_partials, modes)


def _merge_cycle(cycle_id: int, total_readings: int,
                 visitor_partials: Sequence[PartialResult],
                 room_partials: Sequence[PartialResult],
                 modes: Sequence[CountMode]) -> CycleResult:
    visitor_aggregates: dict[TagCategory, int] = {}
    room_aggregates: dict[int, int] = {}
    if CountMode.VISITOR in modes:
        merged, count = merge_partials(visitor_partials, CountMode.VISITOR)
        if count != total_readings:
            raise IntegrityFailure("visitor merge lost pairs")
        visitor_aggregates = {
            tag: merged[tag.value]
            for tag in TagCategory if tag.value in merged
        }
    if CountMode.ROOM in modes:
        merged, count = merge_partials(room_partials, CountMode.ROOM)
        if count != total_readings:
            raise IntegrityFailure("room merge lost pairs")
        room_aggregates = {
            int(key.removeprefix("Room")): value
            for key, value in merged.items()
        }
    return CycleResult(cycle_id=cycle_id,
                       visitor_aggregates=visitor_aggregates,
                       room_aggregates=room_aggregates,
                       total_readings=total_readings)


# ---------------------------------------------------------------------------
# The node actor.
# ---------------------------------------------------------------------------

_TIMER_PRIORITY = {"ping": 0, "slot": 1, "collect": 2, "consolidate": 3,
                   "reduce": 4}

_LEADER_KINDS = {MessageKind.PONG, MessageKind.REGISTER_ACK,
                 MessageKind.SEGMENT_ASSIGN, MessageKind.CYCLE_SUCCESS,
                 MessageKind.CYCLE_ABORT}


@dataclass
class _SubmissionParts:
    total: int
    parts: dict[int, list[tuple[KeyValuePair, int]]] = field(
        default_factory=dict)

    def complete(self) -> bool:
        return len(self.parts) == self.total

    def entries(self) -> list[tuple[KeyValuePair, int]]:
        out: list[tuple[KeyValuePair, int]] = []
        for index in sorted(self.parts):
            out.extend(self.parts[index])
        return out


@dataclass
class _AssignmentParts:
    segment_index: int
    count: int
    checksum: int
    total: int
    parts: dict[int, str] = field(default_factory=dict)

    def complete(self) -> bool:
        return len(self.parts) == self.total

    def text(self) -> str:
        return ",".join(
            self.parts[i] for i in sorted(self.parts) if self.parts[i]
        )


class Node:
    """One middleware node: event-driven, single logical actor.

    Drive it by calling ``on_message`` and ``advance``; ``next_deadline``
    exposes the earliest pending timer so a driver (simulated cluster
    or blocking loop) knows how long it may wait.
    """

    def __init__(self, node_id: NodeId, config: CycleConfig, endpoint,
                 store, reading_source=None, *,
                 rng: Optional[random.Random] = None,
                 override: Optional[NodeId] = None,
                 event_sink: Optional[Callable[[str], None]] = None,
                 max_entries_per_part: Optional[int] = None,
                 modes: Sequence[CountMode] = (CountMode.VISITOR,
                                               CountMode.ROOM)) -> None:
        if node_id < 1:
            raise ValueError("node id must be positive")
        if not modes:
            raise ValueError("need at least one counting mode")
        self.node_id = node_id
        self.config = config
        self.endpoint = endpoint
        self.store = store
        self.source = reading_source
        self.rng = rng if rng is not None else random.Random()
        self.override = override
        self.event_sink = event_sink
        self.max_entries_per_part = max_entries_per_part
        self.modes = tuple(modes)

        self.phase = NodePhase.REGISTERING
        self.buffer = ClientBuffer()
        self.killed = False
        self.cycle_id = -1
        self.slot_start = 0.0
        self.slots_entered = 0
        self.commits = 0
        self.aborts = 0
        self.elections_won = 0
        self.dedupe_dropped = 0
        self.ingest_listener: Optional[
            Callable[[NodeId, int, SensorReading], None]] = None

        self._timers: dict[str, float] = {}
        self._leader_id: Optional[NodeId] = None
        self._leader_address: Optional[str] = None
        self._is_leader = False
        self._check_target: Optional[tuple[NodeId, str]] = None
        self._check_attempts = 0
        self._pending_nonce: Optional[bytes] = None
        self._excluded: set[NodeId] = set()

        # Leader-side per-slot state.
        self._submissions: dict[NodeId, _SubmissionParts] = {}
        self._expected_origins: set[NodeId] = set()
        self._segments: list[Segment] = []
        self._consolidated_count = 0
        self._remote_partials: dict[int, dict] = {}
        self._new_acks: dict[NodeId, int] = {}
        self._watermarks: dict[NodeId, int] = {}
        self._slot_done = False

        # Follower-side per-slot state.
        self._assignments: dict[int, _AssignmentParts] = {}

    # -- plumbing -------------------------------------------------------

    def _log(self, now: float, text: str) -> None:
        if self.event_sink is not None:
            self.event_sink(f"t={now:.3f} node={self.node_id} {text}")

    def _transition(self, now: float, new_phase: NodePhase) -> None:
        if new_phase not in PHASE_EDGES[self.phase]:
            raise MiddlewareError(
                f"illegal phase transition {self.phase.value} -> "
                f"{new_phase.value}"
            )
        self._log(now, f"phase from={self.phase.value} to={new_phase.value} "
                       f"cycle={self.cycle_id}")
        self.phase = new_phase

    def _send(self, now: float, dest: str, message: Message) -> None:
        self.endpoint.send(dest, message)
        self._log(now, f"send kind={message.kind.name.lower()} to={dest} "
                       f"cycle={message.cycle_id} "
                       f"bytes={len(message.payload)}")

    def _arm(self, tag: str, due: float) -> None:
        self._timers[tag] = due

    def _disarm(self, tag: str) -> None:
        self._timers.pop(tag, None)

    def next_deadline(self) -> Optional[float]:
        if self.killed or not self._timers:
            return None
        return min(self._timers.values())

    def kill(self) -> None:
        self.killed = True
        self._timers.clear()
        if hasattr(self.endpoint, "close"):
            self.endpoint.close()

    # -- registry helpers -------------------------------------------------

    def _live_snapshot(self, now: float):
        snapshot = self.store.snapshot_nodes(int(now))
        live = election.live_records(snapshot,
                                     self.config.liveness_window_ms,
                                     int(now))
        return snapshot, live

    def _expected_leader(self, live) -> Optional[NodeId]:
        candidates = [r for r in live if r.node_id not in self._excluded]
        if not candidates:
            return None
        snapshot = election.RegistrySnapshot(
            records=tuple(
                election.NodeRecord(r.node_id, r.address, Role.FOLLOWER,
                                    r.last_seen)
                for r in sorted(candidates, key=lambda r: r.node_id)
            ),
            taken_at=max(r.last_seen for r in candidates),
        )
        override = self.override
        if override is not None and (
            override in self._excluded
            or all(r.node_id != override for r in candidates)
        ):
            override = None
        return election.elect_leader(
            snapshot, override,
            liveness_window_ms=self.config.liveness_window_ms,
        )

    def _address_of(self, node_id: NodeId, live) -> Optional[str]:
        for record in live:
            if record.node_id == node_id:
                return record.address
        return None

    # -- lifecycle ---------------------------------------------------------

    def start(self, now: float) -> None:
        """Register and join the current slot."""
        election.register_node(self.store, self.node_id,
                               self.endpoint.address, int(now),
                               self.config.liveness_window_ms)
        self._log(now, "start")
        self._enter_slot(now)

    def advance(self, now: float) -> None:
        """Fire every timer due at or before now, one at a time."""
        if self.killed:
            return
        while True:
            due = [
                (when, _TIMER_PRIORITY[tag], tag)
                for tag, when in self._timers.items() if when <= now
            ]
            if not due:
                return
            due.sort()
            _, _, tag = due[0]
            del self._timers[tag]
            self._on_timer(tag, now)
            if self.killed:
                return

    def _on_timer(self, tag: str, now: float) -> None:
        if tag == "slot":
            self._enter_slot(now)
        elif tag == "collect":
            self._collection_end(now)
        elif tag == "ping":
            self._ping_timeout(now)
        elif tag == "consolidate":
            self._consolidate(now)
        elif tag == "reduce":
            self._finish_cycle(now)

    # -- slot boundary -------------------------------------------------

    def _enter_slot(self, now: float) -> None:
        duration = self.config.cycle_duration_ms
        self.cycle_id = int(now // duration)
        self.slot_start = self.cycle_id * float(duration)
        self.slots_entered += 1
        self._arm("slot", self.slot_start + duration)
        self._disarm("ping")
        self._disarm("consolidate")
        self._disarm("reduce")
        collect_at = self.slot_start + self.config.collection_ms
        if collect_at > now:
            self._arm("collect", collect_at)

        # Per-slot state resets.
        self._excluded = set()
        self._submissions = {}
        self._expected_origins = set()
        self._segments = []
        self._consolidated_count = 0
        self._remote_partials = {}
        self._new_acks = {}
        self._assignments = {}
        self._slot_done = False
        self._is_leader = False
        self._check_target = None
        self._pending_nonce = None

        self._transition(now, NodePhase.CHECKING_SERVER)
        election.register_node(self.store, self.node_id,
                               self.endpoint.address, int(now),
                               self.config.liveness_window_ms)
        self._resolve_leadership(now)

    def _resolve_leadership(self, now: float) -> None:
        """Work out who should lead and verify or claim accordingly."""
        snapshot, live = self._live_snapshot(now)
        expected = self._expected_leader(live)
        if expected is None or expected == self.node_id:
            self._claim(now, electing=expected is None)
            return
        address = self._address_of(expected, live)
        if address is None:
            self._claim(now, electing=True)
            return
        self._check_target = (expected, address)
        self._check_attempts = 0
        self._send_ping(now)

    def _send_ping(self, now: float) -> None:
        assert self._check_target is not None
        target_id, address = self._check_target
        self._pending_nonce = election.make_nonce(self.rng)
        self._check_attempts += 1
        self._send(now, address, Message(
            kind=MessageKind.PING, sender=self.node_id,
            cycle_id=max(self.cycle_id, 0), payload=self._pending_nonce,
        ))
        self._arm("ping", now + self.config.ping_timeout_ms)

    def _ping_timeout(self, now: float) -> None:
        if self._check_target is None:
            return
        if self._check_attempts < self.config.ping_retries:
            self._send_ping(now)
            return
        # Target looked live in the registry but does not answer:
        # exclude it and re-elect among the rest.
        target_id, _ = self._check_target
        self._excluded.add(target_id)
        self._log(now, f"unreachable node={target_id} cycle={self.cycle_id}")
        if self.phase is not NodePhase.ELECTING:
            self._transition(now, NodePhase.ELECTING)
        snapshot, live = self._live_snapshot(now)
        expected = self._expected_leader(live)
        if expected is None or expected == self.node_id:
            self._claim(now, electing=False)
            return
        address = self._address_of(expected, live)
        if address is None:
            self._claim(now, electing=False)
            return
        self._check_target = (expected, address)
        self._check_attempts = 0
        self._send_ping(now)

    def _claim(self, now: float, electing: bool) -> None:
        """Become leader for this slot and announce it."""
        if electing and self.phase is not NodePhase.ELECTING:
            self._transition(now, NodePhase.ELECTING)
        if self.phase is NodePhase.CHECKING_SERVER:
            self._transition(now, NodePhase.ELECTING)
        election.claim_leadership(self.store, self.node_id,
                                  self.endpoint.address, int(now))
        self._is_leader = True
        self._leader_id = self.node_id
        self._leader_address = self.endpoint.address
        self.elections_won += 1
        self._watermarks.update({
            origin: max(seq, self._watermarks.get(origin, -1))
            for origin, seq in self.store.ack_watermarks().items()
        })
        self._log(now, f"leader_claimed cycle={self.cycle_id}")
        snapshot, live = self._live_snapshot(now)
        announcement = (
            f"leader={self.node_id};addr={self.endpoint.address}"
        ).encode("utf-8")
        for record in live:
            if record.node_id != self.node_id:
                self._send(now, record.address, Message(
                    kind=MessageKind.REGISTER_ACK, sender=self.node_id,
                    cycle_id=max(self.cycle_id, 0), payload=announcement,
                ))
        self._transition(now, NodePhase.COLLECTING)

    def _confirm_leader(self, now: float, leader_id: NodeId,
                        address: str) -> None:
        self._leader_id = leader_id
        self._leader_address = address
        self._is_leader = leader_id == self.node_id
        self._disarm("ping")
        self._check_target = None
        self._pending_nonce = None
        if self.phase in (NodePhase.CHECKING_SERVER, NodePhase.ELECTING):
            self._transition(now, NodePhase.COLLECTING)

    # -- collection end --------------------------------------------------

    def _collection_end(self, now: float) -> None:
        if self.source is not None:
            batch = self.source.take_due(now)
            added = self.buffer.ingest(batch)
            self.dedupe_dropped += len(batch) - len(added)
            if batch:
                self._log(
                    now,
                    f"ingest cycle={self.cycle_id} taken={len(batch)} "
                    f"kept={len(added)}",
                )
            if self.ingest_listener is not None:
                for seq, reading in added:
                    self.ingest_listener(self.node_id, seq, reading)
        if self.phase is not NodePhase.COLLECTING:
            # Never confirmed a leader this slot; keep buffering.
            return
        if self._is_leader:
            self._transition(now, NodePhase.SUBMITTING)
            entries = self.buffer.entries()
            submission = _SubmissionParts(total=1, parts={0: entries})
            self._submissions[self.node_id] = submission
            snapshot, live = self._live_snapshot(now)
            self._expected_origins = {r.node_id for r in live}
            self._transition(now, NodePhase.CONSOLIDATING)
            self._arm("consolidate", now + self.config.submit_window_ms)
            self._maybe_consolidate_early(now)
        elif self._leader_address is not None:
            self._transition(now, NodePhase.SUBMITTING)
            try:
                self._submit(now)
            except LeaderUnknown:
                return
            self._transition(now, NodePhase.AWAITING_SEGMENT)

    def _submit(self, now: float) -> None:
        if self._leader_address is None:
            raise LeaderUnknown("no confirmed leader this slot")
        parts = build_submission_parts(
            self.node_id, self.cycle_id, self.buffer.entries(),
            self.max_entries_per_part,
        )
        for message in parts:
            self._send(now, self._leader_address, message)

    # -- leader path -------------------------------------------------------

    def _on_data_submit(self, message: Message, now: float) -> None:
        if not self._is_leader or message.cycle_id != self.cycle_id:
            return
        if self.phase not in (NodePhase.COLLECTING, NodePhase.SUBMITTING,
                              NodePhase.CONSOLIDATING):
            return
        try:
            fields = _parse_fields(message.payload)
            origin = int(fields["origin"])
            index_str, total_str = fields["part"].split("/")
            index, total = int(index_str), int(total_str)
            entries = _parse_entries(fields["entries"])
        except (ValueError, KeyError):
            self._log(now, f"malformed_submit from={message.sender}")
            return
        submission = self._submissions.get(origin)
        if submission is None or submission.total != total:
            submission = _SubmissionParts(total=total)
            self._submissions[origin] = submission
        submission.parts[index] = entries
        self._maybe_consolidate_early(now)

    def _responding(self) -> list[NodeId]:
        return sorted(
            origin for origin, sub in self._submissions.items()
            if sub.complete()
        )

    def _maybe_consolidate_early(self, now: float) -> None:
        if self.phase is not NodePhase.CONSOLIDATING:
            return
        if self._expected_origins and (
            self._expected_origins <= set(self._responding())
        ):
            self._disarm("consolidate")
            self._consolidate(now)

    def _consolidate(self, now: float) -> None:
        if self.phase is not NodePhase.CONSOLIDATING:
            return
        responding = self._responding()
        if len(responding) < self.config.min_responding_nodes:
            self._abort_cycle(now, "min_responding")
            return
        # Watermark dedupe: drop entries already covered by a commit.
        pairs: list[KeyValuePair] = []
        self._new_acks = {}
        for origin in responding:
            watermark = self._watermarks.get(origin, -1)
            top = watermark
            for pair, seq in self._submissions[origin].entries():
                if seq > watermark:
                    pairs.append(pair)
                    top = max(top, seq)
            if top >= 0:
                self._new_acks[origin] = top
        consolidated = sort_pairs(pairs)
        self._consolidated_count = len(consolidated)
        self._segments = partition(consolidated, responding)
        self._remote_partials = {}
        self._transition(now, NodePhase.DISPATCHING)
        snapshot, live = self._live_snapshot(now)
        for segment in self._segments:
            if segment.assignee == self.node_id:
                continue
            address = self._address_of(segment.assignee, live)
            if address is None:
                continue
            for message in build_assignment_parts(self.node_id,
                                                  self.cycle_id, segment):
                self._send(now, address, message)
        self._transition(now, NodePhase.MERGING)
        self._arm("reduce", now + self.config.reduce_window_ms)
        self._maybe_finish_early(now)

    def _on_reduce_result(self, message: Message, now: float) -> None:
        if not self._is_leader or message.cycle_id != self.cycle_id:
            return
        if self.phase is not NodePhase.MERGING:
            return
        parsed = parse_reduce_result(message)
        if parsed is None:
            self._log(now, f"corrupt_partial from={message.sender}")
            return
        index = parsed["segment"]
        matching = [s for s in self._segments if s.segment_index == index]
        if not matching or matching[0].checksum != parsed["checksum"]:
            self._log(now, f"stale_partial from={message.sender} "
                           f"segment={index}")
            return
        self._remote_partials[index] = parsed
        self._maybe_finish_early(now)

    def _maybe_finish_early(self, now: float) -> None:
        needed = {
            s.segment_index for s in self._segments
            if s.assignee != self.node_id
        }
        if needed <= set(self._remote_partials):
            self._disarm("reduce")
            self._finish_cycle(now)

    def _finish_cycle(self, now: float) -> None:
        if self.phase is not NodePhase.MERGING:
            return
        visitor_partials: list[PartialResult] = []
        room_partials: list[PartialResult] = []
        fallbacks = 0
        for segment in self._segments:
            parsed = self._remote_partials.get(segment.segment_index)
            if segment.assignee != self.node_id and parsed is not None:
                visitor_partials.append(PartialResult(
                    assignee=segment.assignee, mode=CountMode.VISITOR,
                    aggregates=parsed["visitor"],
                    input_pair_count=parsed["count"],
                ))
                room_partials.append(PartialResult(
                    assignee=segment.assignee, mode=CountMode.ROOM,
                    aggregates=parsed["room"],
                    input_pair_count=parsed["count"],
                ))
            else:
                # Local reduction fallback for own or missing segments.
                if segment.assignee != self.node_id:
                    fallbacks += 1
                    self._log(now, "fallback_reduce "
                                   f"segment={segment.segment_index}")
                visitor, room = _reduce_both(segment)
                visitor_partials.append(visitor)
                room_partials.append(room)
        for attempt in range(max(1, self.config.retry_limit)):
            if integrity_check(self._segments, visitor_partials):
                break
            # A remote partial claimed a count that does not conserve
            # pairs: recompute everything locally and re-check.
            self._log(now, f"integrity_retry attempt={attempt + 1}")
            visitor_partials = []
            room_partials = []
            for segment in self._segments:
                visitor, room = _reduce_both(segment)
                visitor_partials.append(visitor)
                room_partials.append(room)
        else:
            self._abort_cycle(now, "integrity")
            return
        try:
            result = _merge_cycle(self.cycle_id, self._consolidated_count,
                                  visitor_partials, room_partials,
                                  self.modes)
        except IntegrityFailure:
            self._abort_cycle(now, "integrity")
            return
        self._transition(now, NodePhase.COMMITTING)
        try:
            rows = self.store.commit_results(result,
                                             committed_at=int(now),
                                             acks=self._new_acks)
        except ConflictingCommit:
            # Another leader won this cycle; our data stays buffered.
            self._log(now, f"commit_conflict cycle={self.cycle_id}")
            self._transition(now, NodePhase.BROADCASTING)
            self._slot_done = True
            return
        self.commits += 1
        self._watermarks.update(self._new_acks)
        self._log(
            now,
            f"commit cycle={self.cycle_id} rows={len(rows)} "
            f"total={result.total_readings} fallbacks={fallbacks}",
        )
        own_ack = self._new_acks.get(self.node_id)
        if own_ack is not None:
            self.buffer.prune_through(own_ack)
        self._transition(now, NodePhase.BROADCASTING)
        snapshot, live = self._live_snapshot(now)
        success = build_success(self.node_id, self.cycle_id, self._new_acks)
        for record in live:
            if record.node_id != self.node_id:
                self._send(now, record.address, success)
        self._slot_done = True

    def _abort_cycle(self, now: float, reason: str) -> None:
        self.aborts += 1
        self._log(now, f"abort cycle={self.cycle_id} reason={reason}")
        self._transition(now, NodePhase.BROADCASTING)
        snapshot, live = self._live_snapshot(now)
        message = Message(kind=MessageKind.CYCLE_ABORT, sender=self.node_id,
                          cycle_id=max(self.cycle_id, 0),
                          payload=f"reason={reason}".encode("utf-8"))
        for record in live:
            if record.node_id != self.node_id:
                self._send(now, record.address, message)
        self._slot_done = True
        self._disarm("consolidate")
        self._disarm("reduce")

    # -- follower path ---------------------------------------------------

    def _on_segment_assign(self, message: Message, now: float) -> None:
        if message.cycle_id != self.cycle_id:
            return
        if self.phase is not NodePhase.AWAITING_SEGMENT:
            return
        try:
            fields = _parse_fields(message.payload)
            index = int(fields["segment"])
            count = int(fields["count"])
            checksum = int(fields["checksum"], 16)
            part_index_str, part_total_str = fields["part"].split("/")
            part_index, part_total = int(part_index_str), int(part_total_str)
            pairs_text = fields["pairs"]
        except (ValueError, KeyError):
            self._log(now, f"malformed_assignment from={message.sender}")
            return
        assignment = self._assignments.get(index)
        if assignment is None or assignment.total != part_total:
            assignment = _AssignmentParts(segment_index=index, count=count,
                                          checksum=checksum,
                                          total=part_total)
            self._assignments[index] = assignment
        assignment.parts[part_index] = pairs_text
        if not assignment.complete():
            return
        text = assignment.text()
        if crc64(text.encode("utf-8")) != assignment.checksum:
            self._log(now, f"checksum_mismatch segment={index}")
            return
        pairs = tuple(parse_pairs(text))
        if len(pairs) != assignment.count:
            self._log(now, f"short_segment segment={index}")
            return
        segment = Segment(assignee=self.node_id, pairs=pairs,
                          segment_index=index, checksum=assignment.checksum)
        self._transition(now, NodePhase.REDUCING)
        try:
            visitor, room = _reduce_both(segment)
        except ChecksumMismatch:
            self._log(now, f"checksum_mismatch segment={index}")
            self._transition(now, NodePhase.AWAITING_RESULT)
            return
        reply = build_reduce_result(
            self.node_id, self.cycle_id, index, assignment.checksum,
            dict(visitor.aggregates), dict(room.aggregates),
            visitor.input_pair_count,
        )
        if self._leader_address is not None:
            self._send(now, self._leader_address, reply)
        self._transition(now, NodePhase.AWAITING_RESULT)

    def _on_cycle_success(self, message: Message, now: float) -> None:
        try:
            acks = parse_success_acks(message)
        except ValueError:
            return
        pruned = 0
        own = acks.get(self.node_id)
        if own is not None:
            pruned = self.buffer.prune_through(own)
        self._log(now, f"outcome cycle={message.cycle_id} kind=success "
                       f"pruned={pruned}")

    def _on_cycle_abort(self, message: Message, now: float) -> None:
        self._log(now, f"outcome cycle={message.cycle_id} kind=abort")

    # -- message entry point ----------------------------------------------

    def on_message(self, message: Message, source: str, now: float) -> None:
        if self.killed:
            return
        self._log(now, f"recv kind={message.kind.name.lower()} "
                       f"from={message.sender} cycle={message.cycle_id}")
        kind = message.kind
        if kind is MessageKind.PING:
            # Always answer: availability is phase-independent.
            self.endpoint.send(source, election.pong_for(message,
                                                         self.node_id))
            return
        if kind is MessageKind.PONG:
            if (self._pending_nonce is not None
                    and message.payload == self._pending_nonce
                    and self._check_target is not None
                    and message.sender == self._check_target[0]):
                target_id, address = self._check_target
                self._confirm_leader(now, target_id, address)
            return
        if kind is MessageKind.REGISTER_ACK:
            try:
                fields = _parse_fields(message.payload)
                leader_id = int(fields["leader"])
                address = fields["addr"]
            except (ValueError, KeyError):
                return
            if leader_id != self.node_id:
                self._confirm_leader(now, leader_id, address)
            return
        if kind is MessageKind.DATA_SUBMIT:
            self._on_data_submit(message, now)
        elif kind is MessageKind.SEGMENT_ASSIGN:
            self._on_segment_assign(message, now)
        elif kind is MessageKind.REDUCE_RESULT:
            self._on_reduce_result(message, now)
        elif kind is MessageKind.CYCLE_SUCCESS:
            self._on_cycle_success(message, now)
        elif kind is MessageKind.CYCLE_ABORT:
            self._on_cycle_abort(message, now)


def drive_node(node: Node, *, clock, stop=None,
               max_slots: Optional[int] = None) -> Node:
    """Blocking receive-and-fire loop around an already-built node.

    Runs until ``stop`` (a threading.Event) is set, the endpoint
    closes, or ``max_slots`` slot boundaries have been entered; with
    none of those it never returns.
    """
    node.start(clock.now_ms())
    while not (stop is not None and stop.is_set()):
        if max_slots is not None and node.slots_entered >= max_slots:
            break
        deadline = node.next_deadline()
        now = clock.now_ms()
        timeout = 50.0 if deadline is None else max(deadline - now, 0.0)
        try:
            received = node.endpoint.recv_from(min(timeout, 100.0))
        except MiddlewareError:
            break
        if received is not None:
            node.on_message(received[0], received[1], clock.now_ms())
        node.advance(clock.now_ms())
        if node.killed:
            break
    return node


def run_node(config: CycleConfig, node_id: NodeId, endpoint, store,
             reading_source=None, *, clock, rng=None, override=None,
             event_sink=None, stop=None, max_slots=None,
             modes: Sequence[CountMode] = (CountMode.VISITOR,
                                           CountMode.ROOM)) -> Node:
    """Build a node and run its blocking event loop (UDP deployments)."""
    node = Node(node_id, config, endpoint, store, reading_source,
                rng=rng, override=override, event_sink=event_sink,
                modes=modes)
    return drive_node(node, clock=clock, stop=stop, max_slots=max_slots)
