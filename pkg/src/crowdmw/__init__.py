"""Fault-tolerant crowd-monitoring middleware.

A small library plus a deterministic multi-node simulator and a CLI
harness.  Nodes register in a shared store, elect the highest live id
as leader, collect badge readings, and run a two-mode MapReduce over a
cyclic datagram protocol, committing aggregates to a durable results
store.
"""

from crowdmw.domain import (
    CountMode,
    KeyValuePair,
    MiddlewareError,
    SensorReading,
    TagCategory,
    parse_tag,
)
from crowdmw.mapreduce import (
    Segment,
    PartialResult,
    CycleResult,
    map_reading,
    sort_pairs,
    partition,
    reduce_segment,
    merge_partials,
    sequential_oracle,
)
from crowdmw.runtime import CycleConfig, Node, NodePhase, run_node

__all__ = [
    "CountMode",
    "CycleConfig",
    "CycleResult",
    "KeyValuePair",
    "MiddlewareError",
    "Node",
    "NodePhase",
    "PartialResult",
    "Segment",
    "SensorReading",
    "TagCategory",
    "map_reading",
    "merge_partials",
    "parse_tag",
    "partition",
    "reduce_segment",
    "run_node",
    "sequential_oracle",
    "sort_pairs",
]

__version__ = "0.1.0"
