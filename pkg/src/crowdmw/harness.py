"""Scenario runner: drives node clusters and reports what happened.

A scenario is a plain-text file of ``key=value`` lines describing the
cluster (size, cycle timing, network behaviour, workload) plus any
number of ``fault=`` lines injecting failures at given times.  The
simulated backend executes the whole cluster on one virtual clock, so
a run is a pure function of the scenario and seed: the same inputs
produce byte-identical event logs and CSV reports.  The UDP backend
runs the same nodes as threads over loopback sockets; it exists to
show the protocol works on a real transport, and makes no determinism
promise.
"""

from __future__ import annotations

import math
import os
import random
import threading
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from crowdmw import election, simgen
from crowdmw.clock import VirtualClock, WallClock
from crowdmw.domain import (
    CountMode,
    DEFAULT_ROOM_COUNT,
    MiddlewareError,
    SensorReading,
    TagCategory,
)
from crowdmw.runtime import (
    CycleConfig,
    ListReadingSource,
    Node,
    drive_node,
)
from crowdmw.store import JournalStore
from crowdmw.transport import (
    NetConfig,
    SimulatedNetwork,
    TransportMode,
    UdpNetwork,
)


class ConfigError(MiddlewareError):
    """Scenario text could not be parsed into a valid configuration."""


class ScenarioDeadlock(MiddlewareError):
    """No cycle outcome for ten cycle durations while nodes still ran."""


# ---------------------------------------------------------------------------
# Scenario configuration.
# ---------------------------------------------------------------------------

_FAULT_KINDS = ("kill_leader", "kill_node", "set_loss", "partition")


@dataclass(frozen=True)
class FaultSpec:
    """One injected failure: what, when, and its parameters."""

    kind: str
    at_ms: float
    node_id: Optional[int] = None
    rate: Optional[float] = None
    nodes: tuple[int, ...] = ()
    duration_ms: Optional[float] = None

    def __post_init__(self) -> None:
        if self.kind not in _FAULT_KINDS:
            raise ConfigError(f"unknown fault kind {self.kind!r}")
        if self.at_ms < 0:
            raise ConfigError("fault time must be >= 0")
        if self.kind == "kill_node" and self.node_id is None:
            raise ConfigError("kill_node needs a node id")
        if self.kind == "set_loss" and not (
            self.rate is not None and 0.0 <= self.rate <= 1.0
        ):
            raise ConfigError("set_loss needs a rate in [0, 1]")
        if self.kind == "partition" and (
            not self.nodes or self.duration_ms is None
            or self.duration_ms <= 0
        ):
            raise ConfigError("partition needs node ids and a duration")


def parse_fault(text: str) -> FaultSpec:
    """Parse one fault expression.

    Forms: ``kill_leader@3000``, ``kill_node@4000:2``,
    ``set_loss@5000:0.25``, ``partition@6000+2000:1,2``.
    """
    kind, at, rest = text.partition("@")
    if not at:
        raise ConfigError(f"fault needs an @time: {text!r}")
    kind = kind.strip()
    when, colon, arg = rest.partition(":")
    duration = None
    if "+" in when:
        when, _, dur = when.partition("+")
        try:
            duration = float(dur)
        except ValueError:
            raise ConfigError(f"bad partition duration in {text!r}") from None
    try:
        at_ms = float(when)
    except ValueError:
        raise ConfigError(f"bad fault time in {text!r}") from None
    try:
        if kind == "kill_node":
            return FaultSpec(kind=kind, at_ms=at_ms, node_id=int(arg))
        if kind == "set_loss":
            return FaultSpec(kind=kind, at_ms=at_ms, rate=float(arg))
        if kind == "partition":
            ids = tuple(int(n) for n in arg.split(",") if n)
            return FaultSpec(kind=kind, at_ms=at_ms, nodes=ids,
                             duration_ms=duration)
        if kind == "kill_leader":
            if colon:
                raise ConfigError(f"kill_leader takes no argument: {text!r}")
            return FaultSpec(kind=kind, at_ms=at_ms)
    except ValueError:
        raise ConfigError(f"bad fault argument in {text!r}") from None
    raise ConfigError(f"unknown fault kind {kind!r}")


@dataclass
class ScenarioConfig:
    """Everything a run needs: cluster, timing, network, workload."""

    nodes: int = 3
    cycles: int = 2
    seed: int = 0
    backend: TransportMode = TransportMode.SIMULATED
    mode: str = "both"

    cycle_duration_ms: int = 2000
    mapreduce_window_ms: int = 500
    min_responding_nodes: int = 2
    retry_limit: int = 3
    ping_timeout_ms: int = 250
    ping_retries: int = 2

    loss_rate: float = 0.0
    latency_ms: tuple[float, float] = (40.0, 90.0)
    transmission_us_per_byte: float = 0.0

    fixture: Optional[str] = None
    visitors: int = 0
    rooms: int = DEFAULT_ROOM_COUNT
    double_read_rate: float = 0.02
    inject_ms: Optional[float] = None
    entries_per_part: Optional[int] = None
    override_leader: Optional[int] = None
    faults: tuple[FaultSpec, ...] = ()

    def __post_init__(self) -> None:
        if self.nodes < 1:
            raise ConfigError("need at least one node")
        if self.cycles < 1:
            raise ConfigError("need at least one cycle")
        if self.mode not in ("visitor", "room", "both"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.visitors < 0:
            raise ConfigError("visitors must be >= 0")
        try:
            self.cycle_config()
            self.net_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def node_ids(self) -> list[int]:
        return list(range(1, self.nodes + 1))

    def count_modes(self) -> tuple[CountMode, ...]:
        if self.mode == "visitor":
            return (CountMode.VISITOR,)
        if self.mode == "room":
            return (CountMode.ROOM,)
        return (CountMode.VISITOR, CountMode.ROOM)

    def cycle_config(self) -> CycleConfig:
        return CycleConfig(
            cycle_duration_ms=self.cycle_duration_ms,
            mapreduce_window_ms=self.mapreduce_window_ms,
            min_responding_nodes=self.min_responding_nodes,
            retry_limit=self.retry_limit,
            ping_timeout_ms=self.ping_timeout_ms,
            ping_retries=self.ping_retries,
        )

    def net_config(self) -> NetConfig:
        return NetConfig(
            loss_rate=self.loss_rate,
            latency_ms=self.latency_ms,
            seed=self.seed,
            mode=self.backend,
            transmission_us_per_byte=self.transmission_us_per_byte,
        )

    def injection_window_ms(self) -> float:
        if self.inject_ms is not None:
            return self.inject_ms
        if self.cycles > 1:
            return float((self.cycles - 1) * self.cycle_duration_ms)
        return float(self.cycle_duration_ms - self.mapreduce_window_ms)


_INT_KEYS = {
    "nodes": "nodes",
    "cycles": "cycles",
    "seed": "seed",
    "cycle_ms": "cycle_duration_ms",
    "window_ms": "mapreduce_window_ms",
    "min_responding": "min_responding_nodes",
    "retry_limit": "retry_limit",
    "ping_timeout_ms": "ping_timeout_ms",
    "ping_retries": "ping_retries",
    "visitors": "visitors",
    "rooms": "rooms",
    "entries_per_part": "entries_per_part",
    "override_leader": "override_leader",
}

_FLOAT_KEYS = {
    "loss_rate": "loss_rate",
    "tx_us_per_byte": "transmission_us_per_byte",
    "inject_ms": "inject_ms",
    "double_read_rate": "double_read_rate",
}


def parse_scenario(text: str) -> ScenarioConfig:
    """Parse scenario text: key=value lines, # comments, blank lines."""
    values: dict = {}
    faults: list[FaultSpec] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value: {raw!r}")
        key = key.strip()
        value = value.strip()
        try:
            if key == "fault":
                faults.append(parse_fault(value))
            elif key in _INT_KEYS:
                values[_INT_KEYS[key]] = int(value)
            elif key in _FLOAT_KEYS:
                values[_FLOAT_KEYS[key]] = float(value)
            elif key == "latency":
                low, colon, high = value.partition(":")
                if not colon:
                    raise ConfigError(
                        f"line {lineno}: latency needs low:high"
                    )
                values["latency_ms"] = (float(low), float(high))
            elif key == "fixture":
                values["fixture"] = value
            elif key == "mode":
                values["mode"] = value
            elif key == "backend":
                values["backend"] = TransportMode(value)
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ConfigError:
            raise
        except ValueError:
            raise ConfigError(
                f"line {lineno}: bad value for {key!r}: {value!r}"
            ) from None
    values["faults"] = tuple(faults)
    try:
        return ScenarioConfig(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_scenario(path: str) -> ScenarioConfig:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return parse_scenario(handle.read())
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path!r}: {exc}") from None


# ---------------------------------------------------------------------------
# Workload construction and routing.
# ---------------------------------------------------------------------------


def route_readings(readings: Iterable[SensorReading],
                   node_ids: Sequence[int]
                   ) -> dict[int, list[tuple[float, SensorReading]]]:
    """Assign each reading's room to a node, round-robin by room."""
    ids = sorted(node_ids)
    routed: dict[int, list[tuple[float, SensorReading]]] = {
        node_id: [] for node_id in ids
    }
    for reading in readings:
        target = ids[(reading.room - 1) % len(ids)]
        routed[target].append((float(reading.timestamp), reading))
    return routed


def build_workload(config: ScenarioConfig) -> tuple[
        dict[int, list[tuple[float, SensorReading]]],
        Optional[simgen.GenerationLedger]]:
    """Produce per-node timed readings for the scenario."""
    routed: dict[int, list[tuple[float, SensorReading]]] = {
        node_id: [] for node_id in config.node_ids()
    }
    ledger = None
    if config.fixture is not None:
        # The whole fixture stream lands on the lowest-id node, which
        # keeps single-source totals easy to audit.
        readings = simgen.replay_fixture(config.fixture)
        first = config.node_ids()[0]
        routed[first].extend(
            (float(r.timestamp), r) for r in readings
        )
    if config.visitors > 0:
        model = simgen.VisitorModel(
            seed=config.seed,
            visitor_count=config.visitors,
            rooms=config.rooms,
            double_read_rate=config.double_read_rate,
        )
        readings, ledger = simgen.generate_stream(
            model, config.injection_window_ms()
        )
        for node_id, timed in route_readings(
            readings, config.node_ids()
        ).items():
            routed[node_id].extend(timed)
    for timed in routed.values():
        timed.sort(key=lambda item: item[0])
    return routed, ledger


# ---------------------------------------------------------------------------
# Simulated cluster driver.
# ---------------------------------------------------------------------------


class SimCluster:
    """Single-threaded executor for a whole cluster on a virtual clock.

    Every pending occurrence (fault, datagram delivery, node timer) is
    globally ordered by time; ties break faults first, deliveries
    second, timers last, then lowest node id.  One occurrence runs per
    step, so any run is exactly reproducible.
    """

    DEADLOCK_FACTOR = 10

    def __init__(self, config: ScenarioConfig, store: JournalStore,
                 *, out_events: Optional[list[str]] = None) -> None:
        self.config = config
        self.store = store
        self.clock = VirtualClock()
        self.network = SimulatedNetwork(config.net_config(), self.clock)
        self.events: list[str] = out_events if out_events is not None else []
        self.nodes: dict[int, Node] = {}
        self.sources: dict[int, ListReadingSource] = {}
        self.ingested: dict[int, list[tuple[int, SensorReading]]] = {}
        self._faults = sorted(config.faults, key=lambda f: f.at_ms)
        self._fault_cursor = 0
        self._last_progress_ms = 0.0

        cycle_config = config.cycle_config()
        routed, self.ledger = build_workload(config)
        for node_id in config.node_ids():
            address = f"node{node_id}:7000"
            endpoint = self.network.open(address)
            source = ListReadingSource(routed[node_id])
            node = Node(
                node_id, cycle_config, endpoint, store, source,
                rng=random.Random((config.seed << 16) ^ node_id),
                override=config.override_leader,
                event_sink=self._sink,
                max_entries_per_part=config.entries_per_part,
                modes=config.count_modes(),
            )
            node.ingest_listener = self._on_ingest
            endpoint.set_handler(
                lambda message, src, bound=node: bound.on_message(
                    message, src, self.clock.now_ms()
                )
            )
            self.nodes[node_id] = node
            self.sources[node_id] = source
            self.ingested[node_id] = []
            # Pre-provision the registry so the first slot already
            # sees the full membership.
            election.register_node(store, node_id, address, 0,
                                   cycle_config.liveness_window_ms)

    def _sink(self, line: str) -> None:
        self.events.append(line)
        if (" commit cycle=" in line or " abort cycle=" in line
                or " leader_claimed " in line):
            self._last_progress_ms = self.clock.now_ms()

    def _on_ingest(self, node_id: int, seq: int,
                   reading: SensorReading) -> None:
        self.ingested[node_id].append((seq, reading))

    # -- occurrence scheduling ------------------------------------------

    def _next_fault(self) -> Optional[float]:
        if self._fault_cursor < len(self._faults):
            return self._faults[self._fault_cursor].at_ms
        return None

    def _next_occurrence(self) -> Optional[tuple[float, int, int]]:
        best: Optional[tuple[float, int, int]] = None
        fault_at = self._next_fault()
        if fault_at is not None:
            best = (fault_at, 0, 0)
        net_at = self.network.next_due_ms()
        if net_at is not None:
            candidate = (net_at, 1, 0)
            if best is None or candidate < best:
                best = candidate
        for node_id in sorted(self.nodes):
            node = self.nodes[node_id]
            deadline = node.next_deadline()
            if deadline is not None:
                candidate = (deadline, 2, node_id)
                if best is None or candidate < best:
                    best = candidate
        return best

    def start(self) -> None:
        for node_id in sorted(self.nodes):
            self.nodes[node_id].start(self.clock.now_ms())

    def run(self, until_ms: float) -> None:
        """Execute occurrences strictly before ``until_ms``."""
        budget = self.DEADLOCK_FACTOR * self.config.cycle_duration_ms
        while True:
            occurrence = self._next_occurrence()
            if occurrence is None or occurrence[0] >= until_ms:
                break
            at, kind, node_id = occurrence
            if at - self._last_progress_ms > budget:
                raise ScenarioDeadlock(
                    f"no cycle outcome between {self._last_progress_ms:.0f}"
                    f" and {at:.0f} ms"
                )
            if kind == 0:
                self.clock.advance_to(at)
                self._apply_fault(self._faults[self._fault_cursor])
                self._fault_cursor += 1
            elif kind == 1:
                self.network.dispatch_next()
            else:
                self.clock.advance_to(at)
                self.nodes[node_id].advance(at)
        if until_ms > self.clock.now_ms():
            self.clock.advance_to(until_ms)

    # -- fault application ------------------------------------------------

    def _live_ids(self) -> list[int]:
        return sorted(
            node_id for node_id, node in self.nodes.items()
            if not node.killed
        )

    def _apply_fault(self, fault: FaultSpec) -> None:
        now = self.clock.now_ms()
        if fault.kind == "kill_leader":
            target = self._current_leader()
            if target is not None:
                self._kill(target, now)
        elif fault.kind == "kill_node":
            if fault.node_id in self.nodes:
                self._kill(fault.node_id, now)
        elif fault.kind == "set_loss":
            self.network.set_loss_rate(fault.rate)
            self.events.append(
                f"t={now:.3f} node=0 set_loss rate={fault.rate}"
            )
        elif fault.kind == "partition":
            addresses = frozenset(
                self.nodes[n].endpoint.address
                for n in fault.nodes if n in self.nodes
            )
            self.network.add_partition(addresses, now,
                                       now + fault.duration_ms)
            ids = ",".join(str(n) for n in sorted(fault.nodes))
            self.events.append(
                f"t={now:.3f} node=0 partition nodes={ids} "
                f"until={now + fault.duration_ms:.3f}"
            )

    def _current_leader(self) -> Optional[int]:
        snapshot = self.store.snapshot_nodes(int(self.clock.now_ms()))
        leader = snapshot.leader_record()
        if leader is not None and leader.node_id in self.nodes:
            if not self.nodes[leader.node_id].killed:
                return leader.node_id
        live = self._live_ids()
        return max(live) if live else None

    def _kill(self, node_id: int, now: float) -> None:
        node = self.nodes[node_id]
        if node.killed:
            return
        node.kill()
        self.events.append(f"t={now:.3f} node={node_id} killed")


# ---------------------------------------------------------------------------
# Metrics.
# ---------------------------------------------------------------------------


def _percentile(samples: Sequence[float], q: float) -> float:
    """Nearest-rank percentile; 0.0 for an empty sample set."""
    if not samples:
        return 0.0
    ordered = sorted(samples)
    rank = max(1, math.ceil(q / 100 * len(ordered)))
    return ordered[rank - 1]


def _parse_event(line: str) -> dict[str, str]:
    fields: dict[str, str] = {}
    parts = line.split(" ")
    fields["t"] = parts[0].partition("=")[2]
    fields["node"] = parts[1].partition("=")[2]
    if len(parts) > 2 and "=" not in parts[2]:
        fields["event"] = parts[2]
        rest = parts[3:]
    else:
        fields["event"] = ""
        rest = parts[2:]
    for part in rest:
        key, sep, value = part.partition("=")
        if sep:
            fields[key] = value
    return fields


@dataclass
class CycleSummary:
    cycle_id: int
    outcome: str
    rows: int
    total_readings: int
    finished_ms: float


@dataclass
class MetricsReport:
    """Latency samples and per-cycle outcomes distilled from events."""

    response_ms: list[float] = field(default_factory=list)
    rtt_ms: list[float] = field(default_factory=list)
    ttfb_ms: list[float] = field(default_factory=list)
    cycles: list[CycleSummary] = field(default_factory=list)

    def metric_rows(self) -> list[tuple[str, list[float]]]:
        return [
            ("response", self.response_ms),
            ("rtt", self.rtt_ms),
            ("ttfb", self.ttfb_ms),
        ]

    def metrics_csv(self) -> str:
        lines = ["metric,count,mean_ms,p50_ms,p95_ms,p99_ms"]
        for name, samples in self.metric_rows():
            mean = sum(samples) / len(samples) if samples else 0.0
            lines.append(
                f"{name},{len(samples)},{mean:.3f},"
                f"{_percentile(samples, 50):.3f},"
                f"{_percentile(samples, 95):.3f},"
                f"{_percentile(samples, 99):.3f}"
            )
        return "\n".join(lines) + "\n"

    def summary_csv(self) -> str:
        lines = ["cycle,outcome,rows,total_readings,finished_ms"]
        for summary in self.cycles:
            lines.append(
                f"{summary.cycle_id},{summary.outcome},{summary.rows},"
                f"{summary.total_readings},{summary.finished_ms:.3f}"
            )
        return "\n".join(lines) + "\n"


_LEADER_KIND_NAMES = {"pong", "register_ack", "segment_assign",
                      "cycle_success", "cycle_abort"}


def build_metrics(events: Sequence[str], cycle_ms: int) -> MetricsReport:
    """Distill latency samples and cycle outcomes from an event log."""
    report = MetricsReport()
    submit_at: dict[tuple[int, int], float] = {}
    ping_fifo: dict[int, list[float]] = {}
    ttfb_seen: set[tuple[int, int]] = set()
    cycle_rows: dict[int, CycleSummary] = {}
    for line in events:
        fields = _parse_event(line)
        t = float(fields["t"])
        node = int(fields["node"])
        event = fields["event"]
        if event == "send":
            kind = fields.get("kind", "")
            cycle = int(fields.get("cycle", -1))
            if kind == "data_submit":
                submit_at.setdefault((node, cycle), t)
            elif kind == "ping":
                ping_fifo.setdefault(node, []).append(t)
        elif event == "recv":
            kind = fields.get("kind", "")
            cycle = int(fields.get("cycle", -1))
            if kind == "pong":
                queue = ping_fifo.get(node)
                if queue:
                    report.rtt_ms.append(t - queue.pop(0))
            if kind in ("cycle_success", "cycle_abort"):
                sent = submit_at.pop((node, cycle), None)
                if sent is not None and kind == "cycle_success":
                    report.response_ms.append(t - sent)
            if kind in _LEADER_KIND_NAMES:
                slot = int(t // cycle_ms)
                if (node, slot) not in ttfb_seen:
                    ttfb_seen.add((node, slot))
                    report.ttfb_ms.append(t - slot * cycle_ms)
        elif event == "commit":
            cycle = int(fields["cycle"])
            cycle_rows[cycle] = CycleSummary(
                cycle_id=cycle, outcome="commit",
                rows=int(fields["rows"]),
                total_readings=int(fields["total"]),
                finished_ms=t,
            )
        elif event == "abort":
            cycle = int(fields["cycle"])
            cycle_rows.setdefault(cycle, CycleSummary(
                cycle_id=cycle, outcome=f"abort:{fields.get('reason', '?')}",
                rows=0, total_readings=0, finished_ms=t,
            ))
    report.cycles = [cycle_rows[c] for c in sorted(cycle_rows)]
    return report


# ---------------------------------------------------------------------------
# Reports.
# ---------------------------------------------------------------------------


@dataclass
class Reconciliation:
    """Where every injected reading ended up, by count."""

    injected: int
    ingested: int
    deduplicated: int
    committed: int
    pending_live: int
    stranded_killed: int
    undelivered: int
    store_total: int

    def conserves(self) -> bool:
        """No reading lost or double counted across the categories."""
        return (
            self.committed == self.store_total
            and self.ingested == (self.committed + self.pending_live
                                  + self.stranded_killed)
            and self.injected == (self.ingested + self.deduplicated
                                  + self.undelivered)
        )


@dataclass
class ScenarioReport:
    config: ScenarioConfig
    events: list[str]
    metrics: MetricsReport
    visitor_totals: dict[str, int]
    room_totals: dict[str, int]
    committed_cycles: list[int]
    leader_id: Optional[int]
    commits: int
    aborts: int
    reconciliation: Optional[Reconciliation]
    nodes: dict[int, Node]
    ledger: Optional[simgen.GenerationLedger]


def _reconcile(config: ScenarioConfig, store: JournalStore,
               cluster_nodes: dict[int, Node],
               sources: dict[int, ListReadingSource],
               ingested: dict[int, list[tuple[int, SensorReading]]],
               ) -> Reconciliation:
    watermarks = store.ack_watermarks()
    injected = sum(source.injected_count() for source in sources.values())
    ingested_count = sum(len(items) for items in ingested.values())
    committed = 0
    pending_live = 0
    stranded = 0
    undelivered = 0
    for node_id, items in ingested.items():
        watermark = watermarks.get(node_id, -1)
        node = cluster_nodes[node_id]
        for seq, _ in items:
            if seq <= watermark:
                committed += 1
            elif node.killed:
                stranded += 1
            else:
                pending_live += 1
    for node_id, source in sources.items():
        undelivered += len(source.remaining())
    deduplicated = sum(
        node.dedupe_dropped for node in cluster_nodes.values()
    )
    # Room-mode counts one per reading, so their sum is the number of
    # readings the store has committed (visitor values sum room ids).
    # A visitor-only run keeps no room rows; fall back to the persisted
    # watermarks, which cover seqs 0..mark per origin.
    if CountMode.ROOM in config.count_modes():
        store_total = sum(store.totals("room").values())
    else:
        store_total = sum(mark + 1 for mark in watermarks.values())
    return Reconciliation(
        injected=injected,
        ingested=ingested_count,
        deduplicated=deduplicated,
        committed=committed,
        pending_live=pending_live,
        stranded_killed=stranded,
        undelivered=undelivered,
        store_total=store_total,
    )


# ---------------------------------------------------------------------------
# Running scenarios.
# ---------------------------------------------------------------------------


def run_scenario(config: ScenarioConfig, store_path: str) -> ScenarioReport:
    if config.backend is TransportMode.SIMULATED:
        return _run_simulated(config, store_path)
    return _run_udp(config, store_path)


def _final_leader(store: JournalStore, nodes: dict[int, Node]
                  ) -> Optional[int]:
    snapshot = store.snapshot_nodes()
    leader = snapshot.leader_record()
    if leader is not None:
        return leader.node_id
    return None


def _build_report(config: ScenarioConfig, store: JournalStore,
                  events: list[str], nodes: dict[int, Node],
                  sources: dict[int, ListReadingSource],
                  ingested: dict[int, list[tuple[int, SensorReading]]],
                  ledger) -> ScenarioReport:
    metrics = build_metrics(events, config.cycle_duration_ms)
    return ScenarioReport(
        config=config,
        events=list(events),
        metrics=metrics,
        visitor_totals=store.totals("visitor"),
        room_totals=store.totals("room"),
        committed_cycles=store.committed_cycles(),
        leader_id=_final_leader(store, nodes),
        commits=sum(node.commits for node in nodes.values()),
        aborts=sum(node.aborts for node in nodes.values()),
        reconciliation=_reconcile(config, store, nodes, sources, ingested),
        nodes=nodes,
        ledger=ledger,
    )


def _run_simulated(config: ScenarioConfig,
                   store_path: str) -> ScenarioReport:
    store = JournalStore(store_path)
    try:
        cluster = SimCluster(config, store)
        cluster.start()
        cluster.run(float(config.cycles * config.cycle_duration_ms))
        return _build_report(config, store, cluster.events, cluster.nodes,
                             cluster.sources, cluster.ingested,
                             cluster.ledger)
    finally:
        store.close()


def _run_udp(config: ScenarioConfig, store_path: str) -> ScenarioReport:
    if any(f.kind == "partition" for f in config.faults):
        raise ConfigError("partition faults need the simulated backend")
    store = JournalStore(store_path)
    clock = WallClock()
    network = UdpNetwork(config.net_config())
    events: list[str] = []
    events_lock = threading.Lock()

    def sink(line: str) -> None:
        with events_lock:
            events.append(line)

    routed, ledger = build_workload(config)
    cycle_config = config.cycle_config()
    nodes: dict[int, Node] = {}
    sources: dict[int, ListReadingSource] = {}
    ingested: dict[int, list[tuple[int, SensorReading]]] = {
        node_id: [] for node_id in config.node_ids()
    }

    def on_ingest(node_id: int, seq: int, reading: SensorReading) -> None:
        with events_lock:
            ingested[node_id].append((seq, reading))

    for node_id in config.node_ids():
        endpoint = network.open()
        source = ListReadingSource(routed[node_id])
        node = Node(
            node_id, cycle_config, endpoint, store, source,
            rng=random.Random((config.seed << 16) ^ node_id),
            override=config.override_leader,
            event_sink=sink,
            max_entries_per_part=config.entries_per_part,
            modes=config.count_modes(),
        )
        node.ingest_listener = on_ingest
        nodes[node_id] = node
        sources[node_id] = source
        election.register_node(store, node_id, endpoint.address, 0,
                               cycle_config.liveness_window_ms)

    stop = threading.Event()
    threads = [
        threading.Thread(
            target=drive_node,
            args=(nodes[node_id],),
            kwargs={"clock": clock, "stop": stop},
            daemon=True,
        )
        for node_id in config.node_ids()
    ]

    def apply_fault(fault: FaultSpec) -> None:
        now = clock.now_ms()
        if fault.kind == "kill_leader":
            snapshot = store.snapshot_nodes(int(now))
            leader = snapshot.leader_record()
            live = [n for n in nodes.values() if not n.killed]
            target = None
            if leader is not None and leader.node_id in nodes:
                if not nodes[leader.node_id].killed:
                    target = leader.node_id
            if target is None and live:
                target = max(n.node_id for n in live)
            if target is not None:
                nodes[target].kill()
                sink(f"t={now:.3f} node={target} killed")
        elif fault.kind == "kill_node" and fault.node_id in nodes:
            nodes[fault.node_id].kill()
            sink(f"t={now:.3f} node={fault.node_id} killed")
        elif fault.kind == "set_loss":
            network.set_loss_rate(fault.rate)
            sink(f"t={now:.3f} node=0 set_loss rate={fault.rate}")

    timers = [
        threading.Timer(fault.at_ms / 1000.0, apply_fault, args=(fault,))
        for fault in config.faults
    ]
    for thread in threads:
        thread.start()
    for timer in timers:
        timer.start()
    end_event = threading.Event()
    end_event.wait(config.cycles * config.cycle_duration_ms / 1000.0)
    stop.set()
    for timer in timers:
        timer.cancel()
    for thread in threads:
        thread.join(timeout=5.0)
    for node in nodes.values():
        if not node.killed:
            node.endpoint.close()
    try:
        return _build_report(config, store, events, nodes, sources,
                             ingested, ledger)
    finally:
        store.close()


def emit_report(report: ScenarioReport, out_dir: str) -> list[str]:
    """Write events.log, metrics.csv and summary.csv; return paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    events_path = os.path.join(out_dir, "events.log")
    with open(events_path, "w", encoding="utf-8") as handle:
        for line in report.events:
            handle.write(line + "\n")
    paths.append(events_path)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    with open(metrics_path, "w", encoding="utf-8") as handle:
        handle.write(report.metrics.metrics_csv())
    paths.append(metrics_path)
    summary_path = os.path.join(out_dir, "summary.csv")
    with open(summary_path, "w", encoding="utf-8") as handle:
        handle.write(report.metrics.summary_csv())
    paths.append(summary_path)
    return paths


# ---------------------------------------------------------------------------
# Load sweep.
# ---------------------------------------------------------------------------

SWEEP_HEADER = "requests,mean_response_ms,rtt_ms,ttfb_ms"


def _sweep_workload(count: int, node_ids: Sequence[int], rooms: int,
                    window_ms: float, seed: int) -> list[SensorReading]:
    """Synthetic single-cycle workload: ``count`` one-entry requests."""
    rng = random.Random(seed)
    tags = sorted(TagCategory, key=lambda tag: tag.value)
    readings = []
    used: set[tuple[str, int, int]] = set()
    for index in range(count):
        tag = tags[index % len(tags)]
        room = (index % rooms) + 1
        at = int(rng.uniform(0.0, window_ms / 2))
        while (tag.value, room, at) in used:
            at += 1
        used.add((tag.value, room, at))
        readings.append(SensorReading(tag=tag, room=room, timestamp=at,
                                      reader_id=2 * room))
    return readings


def sweep_load(request_counts: Sequence[int], *, seed: int = 0,
               store_dir: str, backend: TransportMode =
               TransportMode.SIMULATED) -> list[dict[str, float]]:
    """Measure latency at increasing request volume, one run per count.

    Each request is one single-entry submission datagram.  Sender-side
    serialization cost is enabled so heavier load genuinely queues.
    """
    counts = [int(count) for count in request_counts]
    if counts != sorted(counts) or any(count < 0 for count in counts):
        raise ConfigError("request counts must be ascending and >= 0")
    rows = []
    for count in counts:
        config = ScenarioConfig(
            nodes=3,
            cycles=1,
            seed=seed,
            backend=backend,
            cycle_duration_ms=6000,
            mapreduce_window_ms=2500,
            transmission_us_per_byte=15.0,
            entries_per_part=1,
            inject_ms=1750.0,
        )
        store_path = os.path.join(store_dir, f"sweep_{count}.journal")
        if config.backend is TransportMode.SIMULATED:
            store = JournalStore(store_path)
            try:
                cluster = SimCluster(config, store)
                readings = _sweep_workload(
                    count, config.node_ids(), config.rooms,
                    config.cycle_duration_ms - config.mapreduce_window_ms,
                    seed,
                )
                routed = route_readings(readings, config.node_ids())
                for node_id, timed in routed.items():
                    cluster.sources[node_id] = ListReadingSource(timed)
                    cluster.nodes[node_id].source = (
                        cluster.sources[node_id]
                    )
                cluster.start()
                cluster.run(float(config.cycles
                                  * config.cycle_duration_ms))
                metrics = build_metrics(cluster.events,
                                        config.cycle_duration_ms)
            finally:
                store.close()
        else:
            raise ConfigError("sweep supports the simulated backend only")
        response = metrics.response_ms
        rtt = metrics.rtt_ms
        ttfb = metrics.ttfb_ms
        rows.append({
            "requests": float(count),
            "mean_response_ms": (sum(response) / len(response)
                                 if response else 0.0),
            "rtt_ms": sum(rtt) / len(rtt) if rtt else 0.0,
            "ttfb_ms": sum(ttfb) / len(ttfb) if ttfb else 0.0,
        })
    return rows


def sweep_csv(rows: Sequence[dict[str, float]]) -> str:
    lines = [SWEEP_HEADER]
    for row in rows:
        lines.append(
            f"{int(row['requests'])},{row['mean_response_ms']:.3f},"
            f"{row['rtt_ms']:.3f},{row['ttfb_ms']:.3f}"
        )
    return "\n".join(lines) + "\n"
