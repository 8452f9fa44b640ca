"""Flow traces and windowed traffic matrices.

Traces are CSV files, one flow per line: `flow_id,arrival_s,src_rack,dst_rack,bytes`
(ASCII, LF line endings, optional header, `#` comments skipped). The synthetic
generator stands in for production map-reduce traces: Poisson arrivals and a
heavy-tailed size mix (log-normal body spliced with a Pareto tail above
`pareto_min`), with an optional hotspot knob concentrating flows on a few
rack pairs.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ParameterError, TraceError

TRACE_HEADER = ("flow_id", "arrival_s", "src_rack", "dst_rack", "bytes")


@dataclass(frozen=True)
class FlowRecord:
    flow_id: int
    arrival_time: float
    src_rack: int
    dst_rack: int
    size: int

    def __post_init__(self):
        if self.src_rack == self.dst_rack:
            raise TraceError(f"flow {self.flow_id}: intra-rack flows never traverse the fabric")
        if self.size <= 0:
            raise TraceError(f"flow {self.flow_id}: size must be positive")
        if self.arrival_time < 0:
            raise TraceError(f"flow {self.flow_id}: negative arrival time")


@dataclass(frozen=True)
class SizeDistribution:
    """Log-normal body truncated at `pareto_min`; larger draws are replaced by
    a Pareto(alpha, pareto_min) sample, which forms the elephant tail."""

    lognormal_mu: float = 14.5
    lognormal_sigma: float = 1.5
    pareto_alpha: float = 1.6
    pareto_min: float = 5e7

    def __post_init__(self):
        if self.lognormal_sigma <= 0:
            raise ParameterError("lognormal_sigma must be positive")
        if self.pareto_alpha <= 1.0:
            raise ParameterError("pareto_alpha must exceed 1 for a finite mean")
        if self.pareto_min <= 0:
            raise ParameterError("pareto_min must be positive")

    def mean(self) -> float:
        """Closed-form mean of the spliced distribution."""
        mu, sig, m = self.lognormal_mu, self.lognormal_sigma, self.pareto_min

        def phi(x):
            return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))

        z = (math.log(m) - mu) / sig
        body = math.exp(mu + sig * sig / 2.0) * phi(z - sig)
        tail_prob = 1.0 - phi(z)
        tail_mean = self.pareto_alpha * m / (self.pareto_alpha - 1.0)
        return body + tail_prob * tail_mean

    def sample(self, rng: np.random.Generator) -> int:
        size = math.exp(rng.normal(self.lognormal_mu, self.lognormal_sigma))
        if size > self.pareto_min:
            size = self.pareto_min * (1.0 - rng.random()) ** (-1.0 / self.pareto_alpha)
        return max(1, int(round(size)))


@dataclass(frozen=True)
class TrafficMatrix:
    """Rack-to-rack bytes moved during [window_start, window_end), with cells
    normalized by the maximum cell (all zeros when there was no traffic)."""

    window_start: float
    window_end: float
    cells: np.ndarray
    raw_bytes: np.ndarray = field(repr=False, default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.window_end <= self.window_start:
            raise ParameterError("window_end must exceed window_start")
        if self.raw_bytes is None:
            object.__setattr__(self, "raw_bytes", self.cells.copy())


def traffic_matrix(
    transfers: Iterable[tuple[int, int, float]],
    window: tuple[float, float],
    rack_count: int,
) -> TrafficMatrix:
    """Build a TrafficMatrix from (src_rack, dst_rack, bytes) transfer deltas."""
    t0, t1 = window
    raw = np.zeros((rack_count, rack_count), dtype=np.float64)
    for src, dst, nbytes in transfers:
        raw[src, dst] += nbytes
    peak = raw.max()
    cells = raw / peak if peak > 0 else raw.copy()
    return TrafficMatrix(window_start=t0, window_end=t1, cells=cells, raw_bytes=raw)


def load_trace(path: str, rack_count: int) -> list[FlowRecord]:
    """Parse and validate a trace file, returning arrival-sorted records."""
    records = []
    seen_ids = set()
    with open(path, "r", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (row[0].strip().startswith("#")):
                continue
            if [c.strip().lower() for c in row] == list(TRACE_HEADER):
                continue
            if len(row) != 5:
                raise TraceError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            try:
                rec = FlowRecord(
                    flow_id=int(row[0]),
                    arrival_time=float(row[1]),
                    src_rack=int(row[2]),
                    dst_rack=int(row[3]),
                    size=int(row[4]),
                )
            except ValueError as exc:
                raise TraceError(f"{path}:{lineno}: {exc}") from exc
            except TraceError as exc:
                raise TraceError(f"{path}:{lineno}: {exc}") from exc
            if rec.flow_id in seen_ids:
                raise TraceError(f"{path}:{lineno}: duplicate flow_id {rec.flow_id}")
            seen_ids.add(rec.flow_id)
            if not (0 <= rec.src_rack < rack_count and 0 <= rec.dst_rack < rack_count):
                raise TraceError(
                    f"{path}:{lineno}: rack index out of range 0..{rack_count - 1}"
                )
            records.append(rec)
    records.sort(key=lambda r: (r.arrival_time, r.flow_id))
    return records


def dump_trace(records: Sequence[FlowRecord]) -> str:
    """Serialize records to the CSV trace format (ASCII, LF, header row)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_HEADER)
    for rec in records:
        writer.writerow([rec.flow_id, repr(rec.arrival_time), rec.src_rack, rec.dst_rack, rec.size])
    return buf.getvalue()


def write_trace(path: str, records: Sequence[FlowRecord]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(dump_trace(records))


def synthesize_trace(
    seed: int,
    rack_count: int,
    flow_count: int,
    mean_arrival_rate: float,
    size_distribution: SizeDistribution = SizeDistribution(),
    hotspot_fraction: float = 0.0,
    hotspot_pairs: Sequence[tuple[int, int]] = (),
) -> list[FlowRecord]:
    """Deterministic synthetic workload: Poisson arrivals at
    `mean_arrival_rate` flows/s, sizes from `size_distribution`, and rack
    pairs uniform over distinct pairs except that a `hotspot_fraction` of
    flows lands on `hotspot_pairs` (direction randomized)."""
    if flow_count <= 0:
        raise ParameterError("flow_count must be positive")
    if rack_count < 2:
        raise ParameterError("need at least two racks")
    if mean_arrival_rate <= 0:
        raise ParameterError("mean_arrival_rate must be positive")
    if not 0.0 <= hotspot_fraction <= 1.0:
        raise ParameterError("hotspot_fraction must lie in [0,1]")
    if hotspot_fraction > 0 and not hotspot_pairs:
        raise ParameterError("hotspot_fraction set but no hotspot_pairs given")
    for i, j in hotspot_pairs:
        if i == j or not (0 <= i < rack_count and 0 <= j < rack_count):
            raise ParameterError(f"invalid hotspot pair ({i},{j})")

    rng = np.random.default_rng(seed)
    records = []
    now = 0.0
    for flow_id in range(flow_count):
        now += rng.exponential(1.0 / mean_arrival_rate)
        if hotspot_pairs and rng.random() < hotspot_fraction:
            src, dst = hotspot_pairs[rng.integers(len(hotspot_pairs))]
        else:
            src = int(rng.integers(rack_count))
            dst = int(rng.integers(rack_count - 1))
            if dst >= src:
                dst += 1
        if rng.random() < 0.5:
            src, dst = dst, src
        records.append(
            FlowRecord(
                flow_id=flow_id,
                arrival_time=now,
                src_rack=int(src),
                dst_rack=int(dst),
                size=size_distribution.sample(rng),
            )
        )
    return records
