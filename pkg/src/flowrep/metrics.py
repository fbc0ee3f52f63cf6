"""Per-flow measurements, tail statistics, and report export.

Percentiles are nearest-rank on the sorted sample: tail statistics on
heavy-tailed data should never invent values between samples.  Extreme
quantiles are only reported when the sample is large enough to contain
them (n >= 10 / (1 - q)).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Iterable, Optional

MICE_THRESHOLD = 100_000
ELEPHANT_THRESHOLD = 1_000_000

# Cumulative payload a sender can have delivered after r round trips with an
# initial window of 3 full packets and per-round doubling: 4.5, 13.5, 31.5,
# 67.5, 139.5 ... KB.  Class boundaries for the size-bucket report.
_PKT = 1500
_ROUND_CAPS = []
_cum = 0
_w = 3
for _ in range(8):
    _cum += _w * _PKT
    _ROUND_CAPS.append(_cum)
    _w *= 2

MAX_ROUND_CLASS = 6


@dataclass
class FlowRecord:
    flow_id: str
    scheme: str
    size: int
    start_us: float
    fct_us: float
    src: str = ""
    dst: str = ""
    legs_used: int = 1
    baseline_us: float = 0.0   # kernel overhead; zero in simulation

    @property
    def nfct_us(self) -> float:
        return self.fct_us - self.baseline_us

    @property
    def is_mice(self) -> bool:
        return self.size < MICE_THRESHOLD

    @property
    def is_elephant(self) -> bool:
        return self.size > ELEPHANT_THRESHOLD

    @property
    def round_trip_class(self) -> int:
        """Minimum TCP round trips to carry this flow, capped at 6 groups."""
        for i, cap in enumerate(_ROUND_CAPS):
            if self.size <= cap:
                return min(i + 1, MAX_ROUND_CLASS)
        return MAX_ROUND_CLASS

    @property
    def goodput_bps(self) -> float:
        return self.size * 8 / (self.fct_us * 1e-6)


def percentile(samples, q: float):
    """Nearest-rank percentile: value at index ceil(q*n) of the sorted sample."""
    if not 0 < q < 1:
        raise ValueError("q must be in (0, 1)")
    data = sorted(samples)
    if not data:
        raise ValueError("empty sample")
    rank = math.ceil(q * len(data))
    return data[max(rank, 1) - 1]


def sample_floor(q: float) -> int:
    """Minimum sample count before a q-quantile is considered reportable."""
    return math.ceil(10 / (1 - q))


def summarize(values) -> dict:
    """mean/p99/p999 with the sample-floor guard (None when underpowered)."""
    data = sorted(values)
    n = len(data)
    out = {"n": n, "mean": (sum(data) / n) if n else None}
    for key, q in (("p99", 0.99), ("p999", 0.999)):
        out[key] = percentile(data, q) if n >= sample_floor(q) else None
    return out


def mice_summary(records: Iterable[FlowRecord]) -> dict:
    return summarize([r.nfct_us for r in records if r.is_mice])


def size_bucket_report(records: Iterable[FlowRecord]) -> dict[int, Optional[float]]:
    """99th-percentile NFCT of mice flows grouped by minimum round trips."""
    groups: dict[int, list[float]] = {}
    for r in records:
        if r.is_mice:
            groups.setdefault(r.round_trip_class, []).append(r.nfct_us)
    out = {}
    for cls in sorted(groups):
        vals = groups[cls]
        out[cls] = percentile(vals, 0.99) if len(vals) >= sample_floor(0.99) else None
    return out


def round_class_boundaries() -> list[int]:
    return list(_ROUND_CAPS[:MAX_ROUND_CLASS])


def throughput_report(records: Iterable[FlowRecord],
                      threshold: int = ELEPHANT_THRESHOLD) -> dict:
    """Goodput distribution of flows larger than ``threshold``."""
    puts = sorted(r.goodput_bps for r in records if r.size > threshold)
    if not puts:
        return {"n": 0, "mean_bps": None, "cdf": []}
    cdf = [(g, (i + 1) / len(puts)) for i, g in enumerate(puts)]
    return {"n": len(puts), "mean_bps": sum(puts) / len(puts), "cdf": cdf}


def cdf_table(values, points: int = 1000) -> list[tuple[float, float]]:
    """Evenly spaced quantiles for plotting, nearest-rank per point."""
    data = sorted(values)
    if not data:
        return []
    n = len(data)
    out = []
    for i in range(1, points + 1):
        q = i / points
        out.append((data[min(n - 1, max(0, math.ceil(q * n) - 1))], q))
    return out


# -- persistence -----------------------------------------------------------------

CSV_FIELDS = ["flow_id", "scheme", "size", "start_us", "fct_us", "src", "dst",
              "legs_used"]


def write_flow_csv(path, records: Iterable[FlowRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for r in records:
            w.writerow([r.flow_id, r.scheme, r.size,
                        f"{r.start_us:.3f}", f"{r.fct_us:.3f}",
                        r.src, r.dst, r.legs_used])


def read_flow_csv(path) -> list[FlowRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(FlowRecord(
                flow_id=row["flow_id"], scheme=row["scheme"],
                size=int(row["size"]), start_us=float(row["start_us"]),
                fct_us=float(row["fct_us"]), src=row["src"], dst=row["dst"],
                legs_used=int(row["legs_used"])))
    return out


def summary_json(cells: dict) -> str:
    """Stable-keyed summary: {scheme: {load: {mean,p99,p999,n}}}, microseconds."""
    return json.dumps(cells, indent=2, sort_keys=True)


def write_summary(path, cells: dict) -> None:
    with open(path, "w") as fh:
        fh.write(summary_json(cells))
        fh.write("\n")
