"""Wind-power traces: loading, net generation, aggregation and DTMC fitting.

Traces are evenly spaced. Power is carried in MW and energy per step in MJ;
one MW held for one second is one MJ, so the conversion factor is the cadence
in seconds.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from battshare.errors import AlignmentError, CadenceError, DomainError, ParseError
from battshare.markov_core import UserModel, ValidationReport, chain_to_dict, validate

DEFAULT_CADENCE_SECONDS = 300
POWER = "MW"
ENERGY = "MJ"
_EPOCH = np.datetime64(0, "s")


@dataclass(frozen=True, eq=False)
class TraceSeries:
    """Evenly spaced series of power (MW) or energy per step (MJ)."""

    location: str
    start: np.datetime64
    cadence_seconds: int
    values: np.ndarray
    unit: str = POWER

    def __post_init__(self):
        if self.unit not in (POWER, ENERGY):
            raise DomainError(f"unit must be {POWER!r} or {ENERGY!r}, got {self.unit!r}")
        if self.cadence_seconds <= 0:
            raise DomainError("cadence must be positive")
        values = np.array(self.values, dtype=float)
        if not np.all(np.isfinite(values)):
            raise DomainError(f"trace {self.location!r} has non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "start", np.datetime64(self.start, "s"))

    @classmethod
    def from_values(cls, values, location="synthetic", cadence_seconds=DEFAULT_CADENCE_SECONDS,
                    unit=POWER, start="2007-01-01T00:00:00"):
        return cls(location, np.datetime64(start, "s"), int(cadence_seconds), values, unit)

    def __len__(self):
        return self.values.size

    @property
    def end(self) -> np.datetime64:
        """Timestamp of the last sample."""
        return self.start + np.timedelta64(self.cadence_seconds * (len(self) - 1), "s")

    @property
    def timestamps(self) -> np.ndarray:
        return self.start + np.arange(len(self)) * np.timedelta64(self.cadence_seconds, "s")

    def mean(self) -> float:
        return float(self.values.mean())

    def replace(self, **changes) -> "TraceSeries":
        fields = dict(location=self.location, start=self.start, cadence_seconds=self.cadence_seconds,
                      values=self.values, unit=self.unit)
        fields.update(changes)
        return TraceSeries(**fields)


def _parse_timestamp(text, line):
    s = text.strip()
    if s.endswith("Z"):
        s = s[:-1] + "+00:00"
    try:
        ts = datetime.fromisoformat(s)
    except ValueError as exc:
        raise ParseError(f"bad ISO-8601 timestamp {text!r}", line=line) from exc
    if ts.tzinfo is not None:
        if ts.utcoffset().total_seconds() != 0:
            raise ParseError(f"timestamp {text!r} is not UTC", line=line)
        ts = ts.astimezone(timezone.utc).replace(tzinfo=None)
    return np.datetime64(ts, "s")


def load_trace(path, cadence_seconds: int = DEFAULT_CADENCE_SECONDS, forward_fill: bool = False,
               location: str | None = None) -> TraceSeries:
    """Read a ``timestamp,power_mw`` CSV into a power trace.

    Missing samples (gaps that are whole multiples of the cadence) are
    rejected unless ``forward_fill`` is set, in which case the previous value
    is repeated.

    Raises:
        ParseError: on schema violations, duplicates or out-of-order rows.
        CadenceError: if spacing does not match ``cadence_seconds``.
    """
    path = Path(path)
    location = location or path.stem
    times, values = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["timestamp", "power_mw"]:
            raise ParseError("header must be 'timestamp,power_mw'", line=1)
        step = np.timedelta64(int(cadence_seconds), "s")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise ParseError(f"expected 2 fields, got {len(row)}", line=line)
            ts = _parse_timestamp(row[0], line)
            try:
                v = float(row[1])
            except ValueError as exc:
                raise ParseError(f"bad power value {row[1]!r}", line=line) from exc
            if not math.isfinite(v):
                raise ParseError(f"non-finite power value {row[1]!r}", line=line)
            if times:
                gap = ts - times[-1]
                if gap == np.timedelta64(0, "s"):
                    raise ParseError(f"duplicate timestamp {row[0].strip()}", line=line)
                if gap < np.timedelta64(0, "s"):
                    raise ParseError(f"timestamp {row[0].strip()} is out of order", line=line)
                k, rem = divmod(int(gap / np.timedelta64(1, "s")), int(cadence_seconds))
                if rem or (k > 1 and not forward_fill):
                    raise CadenceError(
                        f"spacing {gap} does not match declared cadence {int(cadence_seconds)}s",
                        line=line,
                    )
                for j in range(1, k):
                    times.append(times[-1] + step)
                    values.append(values[-1])
            times.append(ts)
            values.append(v)
    if not values:
        raise ParseError("no samples", line=2)
    return TraceSeries(location, times[0], int(cadence_seconds), np.array(values), POWER)


def save_trace(trace: TraceSeries, path) -> None:
    """Write a trace in the ``timestamp,power_mw`` schema."""
    power = to_power(trace)
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "power_mw"])
        for ts, v in zip(power.timestamps, power.values):
            w.writerow([f"{ts}Z", repr(float(v))])


def to_energy(trace: TraceSeries) -> TraceSeries:
    """MW samples to MJ per step."""
    if trace.unit == ENERGY:
        return trace
    return trace.replace(values=trace.values * trace.cadence_seconds, unit=ENERGY)


def to_power(trace: TraceSeries) -> TraceSeries:
    """MJ per step to MW samples."""
    if trace.unit == POWER:
        return trace
    return trace.replace(values=trace.values / trace.cadence_seconds, unit=POWER)


def net_generation(trace: TraceSeries, demand_fraction: float = 0.6) -> TraceSeries:
    """Subtract a constant demand equal to ``demand_fraction`` of the mean."""
    if not 0 < demand_fraction < 1:
        raise DomainError(f"demand fraction must lie in (0, 1), got {demand_fraction}")
    mean = trace.mean()
    if mean == 0:
        raise DomainError(f"trace {trace.location!r} has zero mean generation")
    return trace.replace(values=trace.values - demand_fraction * mean)


def demand_level(trace: TraceSeries, demand_fraction: float = 0.6) -> float:
    return demand_fraction * trace.mean()


def autonomy_hours(battery_mj: float, demand_mw: float) -> float:
    """Hours a full battery alone can sustain a constant demand."""
    return battery_mj / demand_mw / 3600.0


def aggregate(traces) -> TraceSeries:
    """Pointwise sum over the common time window of aligned traces."""
    traces = list(traces)
    if not traces:
        raise AlignmentError("nothing to aggregate")
    first = traces[0]
    for t in traces[1:]:
        if t.cadence_seconds != first.cadence_seconds:
            raise AlignmentError(
                f"{t.location!r} has cadence {t.cadence_seconds}s, {first.location!r} has {first.cadence_seconds}s"
            )
        if t.unit != first.unit:
            raise AlignmentError(f"{t.location!r} is in {t.unit}, {first.location!r} is in {first.unit}")
        offset = int((t.start - first.start) / np.timedelta64(1, "s"))
        if offset % first.cadence_seconds:
            raise AlignmentError(
                f"{t.location!r} starts at {t.start}, off the {first.location!r} grid by "
                f"{offset % first.cadence_seconds}s"
            )
    start = max(t.start for t in traces)
    end = min(t.end for t in traces)
    if end < start:
        raise AlignmentError("traces have no common time window")
    step = np.timedelta64(first.cadence_seconds, "s")
    n = int((end - start) / step) + 1
    total = np.zeros(n)
    for t in traces:
        i0 = int((start - t.start) / step)
        total += t.values[i0 : i0 + n]
    return TraceSeries("+".join(t.location for t in traces), start, first.cadence_seconds, total, first.unit)


def resample(trace: TraceSeries, factor: int) -> TraceSeries:
    """Coarsen the cadence by an integer factor.

    Power is decimated (every ``factor``-th sample); energy per step is summed
    over blocks of ``factor`` so total energy is conserved. A trailing partial
    block is dropped.
    """
    factor = int(factor)
    if factor < 1:
        raise DomainError(f"resampling factor must be >= 1, got {factor}")
    if factor == 1:
        return trace
    if trace.unit == POWER:
        values = trace.values[::factor]
    else:
        m = len(trace) // factor
        if m == 0:
            raise DomainError("trace shorter than one resampling block")
        values = trace.values[: m * factor].reshape(m, factor).sum(axis=1)
    return trace.replace(values=values, cadence_seconds=trace.cadence_seconds * factor)


# -- Markov fitting ----------------------------------------------------------

@dataclass
class FitReport:
    """Quantize-and-count DTMC fitted to a trace."""

    edges: np.ndarray | None
    centers: np.ndarray
    counts: np.ndarray
    model: UserModel
    validation: ValidationReport
    granularity: float
    smoothing: float
    dropped_bins: list = field(default_factory=list)

    @property
    def a1_ok(self) -> bool:
        return _passed(self.validation, "A1_self_loops")

    @property
    def a2_ok(self) -> bool:
        return _passed(self.validation, "A2_deficit_state")

    @property
    def smoothed(self) -> bool:
        return self.smoothing > 0

    def chain_spec(self) -> dict:
        return chain_to_dict(self.model)

    def metadata(self) -> dict:
        return {
            "edges": None if self.edges is None else self.edges.tolist(),
            "centers": self.centers.tolist(),
            "transition_counts": self.counts.astype(int).tolist(),
            "granularity": self.granularity,
            "smoothing": self.smoothing,
            "smoothed": self.smoothed,
            "dropped_bins": self.dropped_bins,
            "a1_ok": self.a1_ok,
            "a2_ok": self.a2_ok,
            "validation": self.validation.to_dict(),
        }

    def write(self, chain_path, metadata_path=None) -> None:
        chain_path = Path(chain_path)
        chain_path.write_text(json.dumps(self.chain_spec(), indent=2) + "\n", encoding="utf-8")
        if metadata_path is None:
            metadata_path = chain_path.with_suffix(".meta.json")
        Path(metadata_path).write_text(json.dumps(self.metadata(), indent=2) + "\n", encoding="utf-8")


def _passed(report, name):
    return all(c.passed for c in report.checks if c.name == name)


def fit_dtmc(net, bins=8, granularity: float = 1.0, smoothing: float = 0.0) -> FitReport:
    """Fit an integer-reward DTMC to a net-generation series.

    Args:
        net: TraceSeries or array of net values.
        bins: Number of quantile bins, an explicit increasing edge list, or
            ``"unique"`` to make every distinct value its own state.
        granularity: Energy per reward unit; rewards are bin centers divided
            by this and rounded.
        smoothing: Additive count ``alpha`` applied to every transition, which
            makes every self-loop positive.
    """
    values = np.asarray(getattr(net, "values", net), dtype=float)
    if values.size < 2:
        raise DomainError("need at least two samples to count transitions")
    if granularity <= 0:
        raise DomainError("granularity must be positive")

    edges = None
    if isinstance(bins, str):
        if bins != "unique":
            raise DomainError(f"unknown binning {bins!r}")
        centers, idx = np.unique(values, return_inverse=True)
    else:
        if np.ndim(bins) == 0:
            if int(bins) < 2:
                raise DomainError("need at least two bins")
            edges = np.unique(np.quantile(values, np.linspace(0.0, 1.0, int(bins) + 1)))
        else:
            edges = np.asarray(bins, dtype=float)
            if edges.size < 3 or np.any(np.diff(edges) <= 0):
                raise DomainError("bin edges must be increasing with at least two bins")
        nbins = edges.size - 1
        idx = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, nbins - 1)
        centers = 0.5 * (edges[:-1] + edges[1:])

    m = centers.size
    occupancy = np.bincount(idx, minlength=m)
    dropped = [int(i) for i in np.flatnonzero(occupancy == 0)]
    if dropped:
        warnings.warn(f"dropping empty bins {dropped}", RuntimeWarning, stacklevel=2)
        keep = np.flatnonzero(occupancy > 0)
        remap = -np.ones(m, dtype=np.int64)
        remap[keep] = np.arange(keep.size)
        idx = remap[idx]
        centers = centers[keep]
        m = keep.size
    if m < 2:
        raise DomainError("fitted chain has a single state")

    counts = np.zeros((m, m))
    np.add.at(counts, (idx[:-1], idx[1:]), 1)
    sm = counts + smoothing
    totals = sm.sum(axis=1, keepdims=True)
    P = np.where(totals > 0, sm / np.where(totals > 0, totals, 1), 0.0)
    # A state seen only as the final sample has no outgoing transitions.
    for i in np.flatnonzero(totals[:, 0] == 0):
        P[i, i] = 1.0
    rewards = np.rint(centers / granularity).astype(np.int64)
    model = UserModel(P, rewards, states=[float(c) for c in centers])
    return FitReport(edges, centers, counts, model, validate(model), float(granularity),
                     float(smoothing), dropped)
