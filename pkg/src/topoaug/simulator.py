"""Trace-driven flow-level fluid simulator.

Flows are admitted at their arrival times, pinned to one equal-cost
shortest path by a fixed 64-bit hash of the flow id, and share link
bandwidth max-min fairly. Time advances in agent-facing steps of
`step_seconds`; inside a step the fluid dynamics are event-exact (rates are
recomputed at every arrival, completion, reconfiguration-downtime expiry and
step boundary, and completions are located by depletion time, not by fixed
sub-stepping).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from statistics import median
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import topology as topo_mod
from .errors import StateError
from .topology import RackPair, RackPathEnumerator, Topology, adjacency_state, set_active_optical
from .workload import FlowRecord, TrafficMatrix, traffic_matrix

# duration floor used when a flow starts and finishes in the same instant
T_F_EPS = 1e-6

LinkKey = tuple[int, int]

# placeholders carried by reward-only step reports (build_state=False)
_EMPTY_TM = TrafficMatrix(0.0, 1.0, np.zeros((0, 0)))
_EMPTY_ADJ = np.zeros((0, 0))


def splitmix64(x: int) -> int:
    """Fixed 64-bit mix used to pin flows to ECMP paths (stable across runs)."""
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


def path_links(path: Sequence[int]) -> list[LinkKey]:
    return [(min(a, b), max(a, b)) for a, b in zip(path, path[1:])]


def max_min_rates(
    flow_links: Sequence[Sequence[LinkKey]], capacity: Mapping[LinkKey, float]
) -> list[float]:
    """Max-min fair rates (bits/s) by progressive water-filling.

    Repeatedly find the link with the smallest fair share among its unfrozen
    flows, freeze those flows at that share, and subtract their rates from
    every link they cross. Links iterate in sorted key order so ties resolve
    deterministically (the resulting allocation is unique regardless).
    """
    n_flows = len(flow_links)
    rates = [0.0] * n_flows
    # dense link indexing in sorted key order (deterministic tie-breaks)
    used = sorted({link for links in flow_links for link in links})
    index = {link: i for i, link in enumerate(used)}
    residual = [max(capacity.get(link, 0.0), 0.0) for link in used]
    flow_idx = [[index[link] for link in links] for links in flow_links]
    counts = [0] * len(used)
    for links in flow_idx:
        for li in links:
            counts[li] += 1
    unfrozen = list(range(n_flows))
    while unfrozen:
        best_share = None
        bottleneck = -1
        for li, c in enumerate(counts):
            if c > 0:
                share = residual[li] / c if residual[li] > 0.0 else 0.0
                if best_share is None or share < best_share:
                    best_share = share
                    bottleneck = li
        survivors = []
        for f in unfrozen:
            if bottleneck in flow_idx[f]:
                rates[f] = best_share
                for li in flow_idx[f]:
                    residual[li] -= best_share
                    counts[li] -= 1
            else:
                survivors.append(f)
        unfrozen = survivors
    return rates


def advance_fluid(
    flows: list["FlowState"],
    capacity: Mapping[LinkKey, float],
    t0: float,
    t1: float,
) -> list["FlowState"]:
    """Advance `flows` from t0 to t1 under max-min fair sharing.

    Rates are recomputed after every completion, and completions are located
    exactly from each flow's depletion time (no fixed sub-stepping). Completed
    flows are removed from `flows` (mutated in place) and returned in
    completion order with `finish_time` set; survivors carry updated
    `remaining` and accumulated `transferred_this_step`.
    """
    completed: list[FlowState] = []
    links = [path_links(f.path) for f in flows]  # paths are fixed within a window
    t = t0
    while t < t1 and flows:
        rates = max_min_rates(links, capacity)
        for flow, rate in zip(flows, rates):
            flow.rate_bps = rate
        t_next = t1
        finish_at: dict[int, float] = {}
        for flow in flows:
            if flow.rate_bps > 0:
                tc = t + flow.remaining * 8.0 / flow.rate_bps
                finish_at[flow.record.flow_id] = tc
                if tc < t_next:
                    t_next = tc
        dt = t_next - t
        survivors: list[FlowState] = []
        surviving_links: list[list[LinkKey]] = []
        for flow, flow_links in zip(flows, links):
            fid = flow.record.flow_id
            if fid in finish_at and finish_at[fid] <= t_next:
                # completes at this event; transfer the exact remainder
                flow.transferred_this_step += flow.remaining
                flow.remaining = 0.0
                flow.finish_time = t_next
                flow.rate_bps = 0.0
                completed.append(flow)
            else:
                moved = min(flow.rate_bps / 8.0 * dt, flow.remaining)
                flow.transferred_this_step += moved
                flow.remaining -= moved
                survivors.append(flow)
                surviving_links.append(flow_links)
        flows[:] = survivors
        links = surviving_links
        t = t_next
    return completed


def step_reward(
    summaries: Iterable[tuple[int, float, float]], reward_per_link: bool = True
) -> float:
    """Sum of bytes-per-duration over flows seen during a step.

    Each summary is (hop_count, bytes_this_step, duration_so_far). With
    `reward_per_link` the per-flow term is counted once per link of its path.
    """
    total = 0.0
    for hops, nbytes, duration in summaries:
        term = nbytes / max(duration, T_F_EPS)
        total += hops * term if reward_per_link else term
    return total


@dataclass
class SimConfig:
    step_seconds: float = 1.0
    switch_delay: float = 0.0
    reward_per_link: bool = True


@dataclass
class FlowState:
    record: FlowRecord
    path: tuple[int, ...]
    remaining: float
    start_time: float
    finish_time: Optional[float] = None
    transferred_this_step: float = 0.0
    rate_bps: float = 0.0

    def copy(self) -> "FlowState":
        return FlowState(
            self.record,
            self.path,
            self.remaining,
            self.start_time,
            self.finish_time,
            self.transferred_this_step,
            self.rate_bps,
        )


@dataclass(frozen=True)
class StepReport:
    reward: float
    traffic_matrix: TrafficMatrix
    adjacency: np.ndarray
    completed_flows: tuple[tuple[int, float], ...]
    active_flow_count: int
    done: bool
    step_index: int
    time: float


class Simulator:
    """Single-threaded simulation handle; `clone` yields an independent
    deep snapshot (sharing only immutable inputs and the path cache)."""

    def __init__(
        self,
        topo: Topology,
        trace: Sequence[FlowRecord],
        config: SimConfig | None = None,
        paths: RackPathEnumerator | None = None,
    ):
        self.config = config or SimConfig()
        self.topo, _ = set_active_optical(topo, ())
        self.trace = tuple(sorted(trace, key=lambda r: (r.arrival_time, r.flow_id)))
        self.paths = paths or RackPathEnumerator(self.topo)
        self.now = 0.0
        self.step_index = 0
        self.active: list[FlowState] = []
        self.completed: list[FlowState] = []
        self._next_arrival = 0
        self._downtime_links: frozenset[LinkKey] = frozenset()
        self._active_key = frozenset(self.topo.active_optical)
        self._caps_by_active: dict[frozenset, dict[LinkKey, float]] = {}

    # -- snapshots -----------------------------------------------------------

    def clone(self) -> "Simulator":
        sim = Simulator.__new__(Simulator)
        sim.config = self.config
        sim.topo = self.topo
        sim.trace = self.trace
        sim.paths = self.paths  # shared read/write memo of deterministic results
        sim.now = self.now
        sim.step_index = self.step_index
        sim.active = [f.copy() for f in self.active]
        sim.completed = [f.copy() for f in self.completed]
        sim._next_arrival = self._next_arrival
        sim._downtime_links = self._downtime_links
        sim._active_key = self._active_key
        sim._caps_by_active = self._caps_by_active  # shared memo of pure data
        return sim

    # -- internals -----------------------------------------------------------

    @property
    def done(self) -> bool:
        return self._next_arrival >= len(self.trace) and not self.active

    def _capacities(self) -> dict[LinkKey, float]:
        caps = self._caps_by_active.get(self._active_key)
        if caps is None:
            caps = {l.endpoints: l.capacity for l in self.topo.active_links()}
            self._caps_by_active[self._active_key] = caps
        return caps

    def pin_path(self, record: FlowRecord) -> tuple[int, ...]:
        choices = self.paths.paths(self._active_key, record.src_rack, record.dst_rack)
        return choices[splitmix64(record.flow_id) % len(choices)]

    def _admit(self, record: FlowRecord) -> FlowState:
        flow = FlowState(
            record=record,
            path=self.pin_path(record),
            remaining=float(record.size),
            start_time=record.arrival_time,
        )
        self.active.append(flow)
        return flow

    # -- operations ----------------------------------------------------------

    def apply_action(self, chosen: Iterable[RackPair]) -> bool:
        """Activate exactly `chosen` optical links; reroute active flows when
        the set changed. Returns the change flag."""
        old_active = set(self.topo.active_optical)
        new_topo, changed = set_active_optical(self.topo, chosen)
        if not changed:
            return False
        self.topo = new_topo
        self._active_key = frozenset(new_topo.active_optical)
        for flow in self.active:
            flow.path = self.pin_path(flow.record)
        if self.config.switch_delay > 0:
            added = set(new_topo.active_optical) - old_active
            self._downtime_links = frozenset(
                (min(new_topo.rack_node(i), new_topo.rack_node(j)),
                 max(new_topo.rack_node(i), new_topo.rack_node(j)))
                for i, j in added
            )
        return True

    def step(self, build_state: bool = True) -> StepReport:
        """Advance the simulation by one agent step of `step_seconds`.

        With build_state=False the report carries empty traffic-matrix and
        adjacency placeholders (used when only the reward is needed, e.g. by
        the exhaustive oracle's trial steps).
        """
        if self.done:
            raise StateError("step() called on a finished simulation")
        cfg = self.config
        step_start = self.now
        step_end = step_start + cfg.step_seconds
        downtime_end = step_start + min(cfg.switch_delay, cfg.step_seconds)
        if not self._downtime_links:
            downtime_end = step_start

        for flow in self.active:
            flow.transferred_this_step = 0.0
        participants: dict[int, FlowState] = {f.record.flow_id: f for f in self.active}
        completed_now: list[tuple[int, float]] = []

        caps = self._capacities()

        def effective_caps(t: float) -> Mapping[LinkKey, float]:
            if t < downtime_end:
                masked = dict(caps)
                for link in self._downtime_links:
                    if link in masked:
                        masked[link] = 0.0
                return masked
            return caps

        t = step_start
        while True:
            # admit flows arriving at the current instant ([now, now+t) only;
            # an arrival at exactly step_end belongs to the next step)
            while (
                self._next_arrival < len(self.trace)
                and self.trace[self._next_arrival].arrival_time <= t
                and self.trace[self._next_arrival].arrival_time < step_end
            ):
                flow = self._admit(self.trace[self._next_arrival])
                flow.transferred_this_step = 0.0
                participants[flow.record.flow_id] = flow
                self._next_arrival += 1
            if t >= step_end:
                break

            # run the fluid dynamics to the next population/capacity change
            boundary = step_end
            if (
                self._next_arrival < len(self.trace)
                and self.trace[self._next_arrival].arrival_time < step_end
            ):
                boundary = min(boundary, self.trace[self._next_arrival].arrival_time)
            if t < downtime_end:
                boundary = min(boundary, downtime_end)
            for flow in advance_fluid(self.active, effective_caps(t), t, boundary):
                self.completed.append(flow)
                completed_now.append(
                    (flow.record.flow_id, flow.finish_time - flow.record.arrival_time)
                )
            t = boundary

        self.now = step_end
        self.step_index += 1
        self._downtime_links = frozenset()

        summaries = []
        transfers = []
        for flow in participants.values():
            duration = (flow.finish_time if flow.finish_time is not None else step_end)
            duration -= flow.start_time
            summaries.append((len(flow.path) - 1, flow.transferred_this_step, duration))
            transfers.append(
                (flow.record.src_rack, flow.record.dst_rack, flow.transferred_this_step)
            )
        reward = step_reward(summaries, cfg.reward_per_link)
        if build_state:
            tm = traffic_matrix(transfers, (step_start, step_end), self.topo.num_racks)
            adjacency = adjacency_state(self.topo)
        else:
            tm = _EMPTY_TM
            adjacency = _EMPTY_ADJ
        return StepReport(
            reward=reward,
            traffic_matrix=tm,
            adjacency=adjacency,
            completed_flows=tuple(completed_now),
            active_flow_count=len(self.active),
            done=self.done,
            step_index=self.step_index,
            time=self.now,
        )

    def fct_summary(self) -> tuple[list[tuple[int, float]], Optional[float]]:
        """Per-flow completion times and their median; requires a finished run."""
        if not self.done:
            raise StateError("fct_summary() requires a finished simulation")
        pairs = [
            (f.record.flow_id, f.finish_time - f.record.arrival_time) for f in self.completed
        ]
        pairs.sort()
        med = median(fct for _, fct in pairs) if pairs else None
        return pairs, med


def reset(
    topo: Topology,
    trace: Sequence[FlowRecord],
    config: SimConfig | None = None,
    paths: RackPathEnumerator | None = None,
) -> tuple[Simulator, StepReport]:
    """Fresh simulation at time zero with all optical links inactive."""
    sim = Simulator(topo, trace, config, paths)
    step = sim.config.step_seconds
    report = StepReport(
        reward=0.0,
        traffic_matrix=traffic_matrix((), (-step, 0.0), sim.topo.num_racks),
        adjacency=adjacency_state(sim.topo),
        completed_flows=(),
        active_flow_count=0,
        done=sim.done,
        step_index=0,
        time=0.0,
    )
    return sim, report


# -- export helpers ------------------------------------------------------------


def step_report_json(report: StepReport) -> str:
    """One JSON line per report, for debugging dumps."""
    return json.dumps(
        {
            "step": report.step_index,
            "time_s": report.time,
            "reward": report.reward,
            "active_flows": report.active_flow_count,
            "completed": [[fid, fct] for fid, fct in report.completed_flows],
            "done": report.done,
            "tm_max_bytes": float(report.traffic_matrix.raw_bytes.max()),
        },
        sort_keys=True,
    )


def fct_rows(sim: Simulator) -> list[tuple[int, float, float, int]]:
    """Rows for the per-flow FCT table: flow_id, arrival_s, fct_s, bytes."""
    rows = [
        (
            f.record.flow_id,
            f.record.arrival_time,
            f.finish_time - f.record.arrival_time,
            f.record.size,
        )
        for f in sim.completed
    ]
    rows.sort()
    return rows
