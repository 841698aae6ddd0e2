"""Scenario parsing, simulated runs, metrics distillation, reports.

Simulated runs here pin down behaviour end to end: totals against the
deduplicated ground truth, reading conservation under faults, and
byte-stable artifacts for the same seed.
"""

import os

import pytest

from crowdmw.domain import CountMode, SensorReading, TagCategory
from crowdmw.harness import (
    ConfigError,
    FaultSpec,
    MetricsReport,
    ScenarioConfig,
    ScenarioDeadlock,
    SWEEP_HEADER,
    _percentile,
    build_metrics,
    build_workload,
    emit_report,
    load_scenario,
    parse_fault,
    parse_scenario,
    route_readings,
    run_scenario,
    sweep_csv,
    sweep_load,
)
from crowdmw.transport import TransportMode

TABLE_VISITOR = {"man": 10, "other": 12, "woman": 21}
TABLE_ROOM = {"Room1": 2, "Room2": 5, "Room3": 5, "Room4": 4}


# -- fault expressions --------------------------------------------------------


def test_parse_fault_forms():
    kill = parse_fault("kill_leader@3000")
    assert (kill.kind, kill.at_ms) == ("kill_leader", 3000.0)
    node = parse_fault("kill_node@4000:2")
    assert (node.kind, node.at_ms, node.node_id) == ("kill_node", 4000.0, 2)
    loss = parse_fault("set_loss@5000:0.25")
    assert (loss.kind, loss.rate) == ("set_loss", 0.25)
    cut = parse_fault("partition@6000+2000:1,2")
    assert (cut.kind, cut.at_ms, cut.nodes, cut.duration_ms) == \
        ("partition", 6000.0, (1, 2), 2000.0)


@pytest.mark.parametrize("text", [
    "kill_leader",
    "melt_down@100",
    "kill_node@100",
    "kill_node@100:x",
    "kill_leader@abc",
    "kill_leader@100:3",
    "set_loss@100:1.5",
    "set_loss@100:",
    "partition@100:1,2",
    "partition@100+0:1,2",
    "partition@100+abc:1,2",
    "partition@100+500:",
])
def test_parse_fault_rejects(text):
    with pytest.raises(ConfigError):
        parse_fault(text)


def test_fault_spec_validates_directly():
    with pytest.raises(ConfigError):
        FaultSpec(kind="kill_leader", at_ms=-1)
    with pytest.raises(ConfigError):
        FaultSpec(kind="set_loss", at_ms=0, rate=1.01)
    # total loss is a legal setting, not an error
    assert FaultSpec(kind="set_loss", at_ms=0, rate=1.0).rate == 1.0


# -- scenario text ------------------------------------------------------------

SCENARIO_TEXT = """\
# cluster shape
nodes = 4
cycles = 3
seed = 42

cycle_ms = 1000
window_ms = 300
min_responding = 3

loss_rate = 0.1
latency = 5:20
tx_us_per_byte = 2.5

visitors = 25
rooms = 3
mode = room
backend = sim

fault = kill_leader@1500
fault = set_loss@2000:0.0
"""


def test_parse_scenario_full():
    config = parse_scenario(SCENARIO_TEXT)
    assert config.nodes == 4
    assert config.cycles == 3
    assert config.seed == 42
    assert config.cycle_duration_ms == 1000
    assert config.mapreduce_window_ms == 300
    assert config.min_responding_nodes == 3
    assert config.loss_rate == 0.1
    assert config.latency_ms == (5.0, 20.0)
    assert config.transmission_us_per_byte == 2.5
    assert config.visitors == 25
    assert config.rooms == 3
    assert config.mode == "room"
    assert config.backend is TransportMode.SIMULATED
    assert [f.kind for f in config.faults] == ["kill_leader", "set_loss"]


def test_parse_scenario_defaults():
    config = parse_scenario("")
    assert config.nodes == 3
    assert config.cycles == 2
    assert config.cycle_duration_ms == 2000
    assert config.faults == ()


@pytest.mark.parametrize("text", [
    "bogus_key = 1",
    "nodes",
    "nodes = many",
    "latency = 40",
    "mode = sideways",
    "backend = carrier_pigeon",
    "fault = melt_down@100",
    "cycles = 0",
    "window_ms = 5000",
    "loss_rate = 2.0",
])
def test_parse_scenario_rejects(text):
    with pytest.raises(ConfigError):
        parse_scenario(text)


def test_load_scenario_roundtrip(tmp_path):
    path = tmp_path / "run.scenario"
    path.write_text(SCENARIO_TEXT, encoding="utf-8")
    assert load_scenario(str(path)) == parse_scenario(SCENARIO_TEXT)


def test_injection_window_defaults():
    assert ScenarioConfig(cycles=3).injection_window_ms() == 4000.0
    assert ScenarioConfig(cycles=1).injection_window_ms() == 1500.0
    assert ScenarioConfig(inject_ms=250.0).injection_window_ms() == 250.0


# -- workload routing ---------------------------------------------------------


def test_route_readings_round_robin_by_room():
    readings = [SensorReading(tag=TagCategory.MAN, room=room, timestamp=room)
                for room in (1, 2, 3, 4, 5)]
    routed = route_readings(readings, [30, 10, 20])
    assert [r.room for _, r in routed[10]] == [1, 4]
    assert [r.room for _, r in routed[20]] == [2, 5]
    assert [r.room for _, r in routed[30]] == [3]
    assert all(at == float(r.timestamp) for node in routed.values()
               for at, r in node)


def test_build_workload_fixture_lands_on_lowest_id():
    config = ScenarioConfig(fixture="table1")
    routed, ledger = build_workload(config)
    assert len(routed[1]) == 16
    assert routed[2] == [] and routed[3] == []
    assert ledger is None


def test_build_workload_generated_ledger_alignment():
    config = ScenarioConfig(visitors=30, seed=9, cycles=3)
    routed, ledger = build_workload(config)
    assert ledger is not None
    total = sum(len(items) for items in routed.values())
    assert total == len(ledger)


# -- metrics ------------------------------------------------------------------


def test_percentile_nearest_rank():
    samples = [10.0, 20.0, 30.0, 40.0]
    assert _percentile(samples, 50) == 20.0
    assert _percentile(samples, 95) == 40.0
    assert _percentile([7.0], 99) == 7.0
    assert _percentile([], 50) == 0.0


SYNTHETIC_EVENTS = [
    "t=100.000 node=1 send kind=ping to=node3:7000 cycle=0 bytes=0",
    "t=130.000 node=1 recv kind=pong from=node3:7000 cycle=0 bytes=0",
    "t=200.000 node=1 send kind=data_submit to=node3:7000 cycle=0 bytes=40",
    "t=210.000 node=2 send kind=data_submit to=node3:7000 cycle=0 bytes=40",
    "t=450.000 node=1 recv kind=cycle_success from=node3:7000 cycle=0 bytes=8",
    "t=470.000 node=2 recv kind=cycle_success from=node3:7000 cycle=0 bytes=8",
    "t=480.000 node=3 commit cycle=0 rows=8 total=16",
    "t=900.000 node=3 abort cycle=1 reason=min_responding",
]


def test_build_metrics_from_synthetic_log():
    report = build_metrics(SYNTHETIC_EVENTS, cycle_ms=500)
    assert report.rtt_ms == [30.0]
    assert sorted(report.response_ms) == [250.0, 260.0]
    # First leader-sourced byte per (node, slot), measured from the
    # slot start: pong at 130 for node 1, success at 470 for node 2.
    assert sorted(report.ttfb_ms) == [130.0, 470.0]
    assert [c.outcome for c in report.cycles] == ["commit",
                                                  "abort:min_responding"]
    assert report.cycles[0].rows == 8
    assert report.cycles[0].total_readings == 16


def test_metrics_csv_shapes():
    report = build_metrics(SYNTHETIC_EVENTS, cycle_ms=500)
    metrics_lines = report.metrics_csv().splitlines()
    assert metrics_lines[0] == "metric,count,mean_ms,p50_ms,p95_ms,p99_ms"
    assert [line.split(",")[0] for line in metrics_lines[1:]] == \
        ["response", "rtt", "ttfb"]
    summary_lines = report.summary_csv().splitlines()
    assert summary_lines[0] == "cycle,outcome,rows,total_readings,finished_ms"
    assert len(summary_lines) == 3


def test_empty_metrics_do_not_divide_by_zero():
    report = MetricsReport()
    assert "response,0,0.000" in report.metrics_csv()
    assert report.summary_csv().splitlines() == [
        "cycle,outcome,rows,total_readings,finished_ms"]


# -- simulated runs -----------------------------------------------------------


def test_reference_scenario_totals(tmp_path):
    config = ScenarioConfig(fixture="table1", seed=1)
    report = run_scenario(config, str(tmp_path / "store.journal"))
    assert report.visitor_totals == TABLE_VISITOR
    assert report.room_totals == TABLE_ROOM
    assert report.leader_id == 3
    assert report.commits >= 1
    assert report.reconciliation.conserves()
    assert report.reconciliation.committed == 16


def test_generated_scenario_matches_ledger(tmp_path):
    config = ScenarioConfig(visitors=40, cycles=4, seed=21)
    report = run_scenario(config, str(tmp_path / "store.journal"))
    assert report.visitor_totals == report.ledger.expected_counts(
        CountMode.VISITOR)
    assert report.reconciliation.conserves()
    assert report.reconciliation.pending_live == 0


def test_lossy_run_with_leader_kill_conserves(tmp_path):
    config = ScenarioConfig(
        nodes=5, visitors=60, cycles=6, seed=13, loss_rate=0.2,
        faults=(parse_fault("kill_leader@2500"),
                parse_fault("set_loss@9000:0.0")))
    report = run_scenario(config, str(tmp_path / "store.journal"))
    assert report.reconciliation.conserves()
    assert report.commits >= 1
    # The dead node held the crown; a survivor must hold it now.
    assert report.leader_id in {1, 2, 3, 4}


def test_partition_blocks_then_heals(tmp_path):
    config = ScenarioConfig(
        nodes=3, visitors=30, cycles=5, seed=8,
        faults=(parse_fault("partition@2500+2000:1,2"),))
    report = run_scenario(config, str(tmp_path / "store.journal"))
    assert report.reconciliation.conserves()
    assert report.commits >= 1


def test_two_node_floor_aborts_without_peer(tmp_path):
    config = ScenarioConfig(
        nodes=2, visitors=10, cycles=3, seed=4,
        faults=(parse_fault("kill_node@500:1"),))
    report = run_scenario(config, str(tmp_path / "store.journal"))
    assert report.commits == 0
    assert report.aborts >= 1
    assert any("abort" in line and "min_responding" in line
               for line in report.events)


def test_mode_filter_limits_store_rows(tmp_path):
    config = ScenarioConfig(fixture="table1", mode="visitor", seed=1)
    report = run_scenario(config, str(tmp_path / "store.journal"))
    assert report.visitor_totals == TABLE_VISITOR
    assert report.room_totals == {}


def test_same_seed_same_artifacts(tmp_path):
    config_text = (
        "nodes = 4\ncycles = 4\nseed = 77\nvisitors = 35\n"
        "loss_rate = 0.15\nfault = kill_leader@3000\n"
    )
    outputs = []
    for run in ("a", "b"):
        config = parse_scenario(config_text)
        report = run_scenario(config, str(tmp_path / f"{run}.journal"))
        out_dir = str(tmp_path / run)
        emit_report(report, out_dir)
        blob = {}
        for name in ("events.log", "metrics.csv", "summary.csv"):
            with open(os.path.join(out_dir, name), "rb") as handle:
                blob[name] = handle.read()
        with open(str(tmp_path / f"{run}.journal"), "rb") as handle:
            blob["journal"] = handle.read()
        outputs.append(blob)
    assert outputs[0] == outputs[1]


def test_emit_report_reemit_identical(tmp_path):
    config = ScenarioConfig(fixture="table1", seed=1)
    report = run_scenario(config, str(tmp_path / "store.journal"))
    first = emit_report(report, str(tmp_path / "out"))
    before = [open(path, "rb").read() for path in first]
    second = emit_report(report, str(tmp_path / "out"))
    assert first == second
    assert [open(path, "rb").read() for path in second] == before


def test_dead_cluster_trips_deadlock_guard(tmp_path):
    # Every node dies early while a far-future fault keeps the scenario
    # nominally alive; the watchdog must refuse to idle through it.
    config = ScenarioConfig(
        nodes=2, cycles=40, seed=2,
        faults=(parse_fault("kill_node@100:1"),
                parse_fault("kill_node@150:2"),
                parse_fault("set_loss@70000:0.5")))
    with pytest.raises(ScenarioDeadlock):
        run_scenario(config, str(tmp_path / "store.journal"))


def test_total_blackout_reelects_without_deadlock(tmp_path):
    # Total datagram loss starves every cycle, but nodes keep claiming
    # leadership through the shared registry; that is progress, so the
    # watchdog stays quiet and the run ends with zero commits.
    config = ScenarioConfig(
        nodes=2, cycles=4, seed=8, visitors=10,
        faults=(parse_fault("set_loss@0:1.0"),))
    report = run_scenario(config, str(tmp_path / "store.journal"))
    assert report.commits == 0
    assert report.visitor_totals == {}
    claims = [line for line in report.events if " leader_claimed " in line]
    assert len(claims) >= config.cycles


def test_udp_backend_smoke(tmp_path):
    config = ScenarioConfig(
        fixture="table1", seed=1, backend=TransportMode.UDP,
        cycle_duration_ms=800, mapreduce_window_ms=300)
    report = run_scenario(config, str(tmp_path / "store.journal"))
    assert report.visitor_totals == TABLE_VISITOR
    assert report.room_totals == TABLE_ROOM
    assert report.reconciliation.conserves()


def test_udp_backend_rejects_partitions(tmp_path):
    config = ScenarioConfig(
        fixture="table1", backend=TransportMode.UDP,
        faults=(parse_fault("partition@100+200:1,2"),))
    with pytest.raises(ConfigError):
        run_scenario(config, str(tmp_path / "store.journal"))


# -- sweep --------------------------------------------------------------------


def test_sweep_rejects_unsorted_counts(tmp_path):
    with pytest.raises(ConfigError):
        sweep_load([100, 10], store_dir=str(tmp_path))
    with pytest.raises(ConfigError):
        sweep_load([-5], store_dir=str(tmp_path))


def test_sweep_rows_and_csv(tmp_path):
    rows = sweep_load([0, 40], store_dir=str(tmp_path))
    assert [int(row["requests"]) for row in rows] == [0, 40]
    assert rows[1]["mean_response_ms"] > 0.0
    # Identical timer schedule before load: control-plane latency stays
    # flat while response tracks volume.
    assert rows[0]["rtt_ms"] == pytest.approx(rows[1]["rtt_ms"], rel=0.2)
    text = sweep_csv(rows)
    lines = text.splitlines()
    assert lines[0] == SWEEP_HEADER
    assert len(lines) == 3
    assert lines[1].startswith("0,")


def test_sweep_csv_header_only_for_no_counts():
    assert sweep_csv([]) == SWEEP_HEADER + "\n"
