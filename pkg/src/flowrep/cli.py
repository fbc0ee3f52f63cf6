"""Experiment runner: scenario configs in, CSV/JSON tables out.

Config files are plain ``key = value`` text with explicit units on every
dimensioned quantity (``200ms``, ``100KB``, ``1Gbps``, ``2000pkt``); lists
are space- or comma-separated.  Every command writes a run manifest next to
its outputs and touches nothing outside the output directory.
"""

from __future__ import annotations

import argparse
import asyncio
import hashlib
import json
import re
import sys
from pathlib import Path

from . import __version__
from .core import Scheme
from .experiments import (
    TESTBED_QUEUE_PKTS,
    count_payload_connections,
    run_cells,
    run_probe_experiment,
    run_sort_series,
)
from .metrics import summarize, write_flow_csv, write_summary
from .workload import SortJobSpec

_QTY = re.compile(r"^(-?\d+(?:\.\d+)?)\s*([A-Za-z]*)$")

_UNITS = {
    # time -> seconds
    "us": 1e-6, "ms": 1e-3, "s": 1.0,
    # size -> bytes
    "b": 1, "kb": 1_000, "mb": 1_000_000, "gb": 1_000_000_000,
    # rate -> bits/s
    "bps": 1, "kbps": 1_000, "mbps": 1_000_000, "gbps": 1_000_000_000,
    # packets
    "pkt": 1, "pkts": 1,
}


class ConfigError(Exception):
    pass


def parse_quantity(text: str):
    """'200ms' -> (0.2, 's'-class); bare numbers come back unit-less."""
    m = _QTY.match(text.strip())
    if not m:
        raise ConfigError(f"cannot parse quantity {text!r}")
    value, unit = float(m.group(1)), m.group(2).lower()
    if not unit:
        return value, None
    if unit not in _UNITS:
        raise ConfigError(f"unknown unit {unit!r} in {text!r}")
    return value * _UNITS[unit], unit


class Config:
    """Parsed scenario file with typed, unit-checked accessors."""

    def __init__(self, raw: dict[str, str], text: str = ""):
        self.raw = raw
        self.text = text

    @classmethod
    def load(cls, path) -> "Config":
        text = Path(path).read_text()
        raw = {}
        for i, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{i}: expected 'key = value'")
            key, value = line.split("=", 1)
            raw[key.strip()] = value.strip()
        return cls(raw, text)

    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()

    def get(self, key, default=None):
        return self.raw.get(key, default)

    def number(self, key, default=None) -> float:
        if key not in self.raw:
            if default is None:
                raise ConfigError(f"missing config key {key!r}")
            return default
        value, _ = parse_quantity(self.raw[key])
        return value

    def integer(self, key, default=None) -> int:
        return int(self.number(key, default))

    def seconds(self, key, default=None) -> float:
        return self.number(key, default)

    def list_of(self, key, default=(), conv=str) -> list:
        if key not in self.raw:
            return list(default)
        items = self.raw[key].replace(",", " ").split()
        return [conv(x) for x in items]

    def schemes(self) -> list[Scheme]:
        names = self.list_of("schemes", default=["plain", "repflow", "repsyn"])
        return [Scheme(n) for n in names]

    def seeds(self, override=None) -> list[int]:
        if override is not None:
            return [override]
        return self.list_of("seeds", default=[1], conv=int)


def _write_manifest(out: Path, cfg: Config, args, extra=None) -> None:
    manifest = {
        "tool": "flowrep",
        "version": __version__,
        "command": args.command,
        "config_sha256": cfg.sha256(),
        "config": cfg.raw,
        "seeds": cfg.seeds(args.seed),
        "argv": sys.argv[1:],
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _schemes(cfg: Config, args) -> list[Scheme]:
    if args.scheme:
        return [Scheme(args.scheme)]
    return cfg.schemes()


def cmd_probe(cfg: Config, args, out: Path) -> int:
    probes = cfg.integer("probes", 10_000)
    interval = int(cfg.seconds("probe_interval", 400e-6) * 1e9)
    queue = cfg.integer("queue", TESTBED_QUEUE_PKTS)
    seed = cfg.seeds(args.seed)[0]
    summary = {}
    for scheme in _schemes(cfg, args):
        res = run_probe_experiment(scheme, probes=probes, seed=seed,
                                   queue_pkts=queue, interval_ns=interval)
        with open(out / f"rtt_{scheme}.csv", "w") as fh:
            fh.write("t_us,rtt_us,scheme\n")
            for t_ns, rtt_ns in res.samples:
                fh.write(f"{t_ns / 1000:.1f},{rtt_ns / 1000:.1f},{scheme}\n")
        summary[str(scheme)] = {
            "n": len(res.samples),
            "idle_rtt_us": res.idle_rtt_ns / 1000,
            "threshold_us": res.threshold_ns / 1000,
            "elevated_fraction": res.elevated_fraction,
        }
    (out / "probe_summary.json").write_text(json.dumps(summary, indent=2,
                                                       sort_keys=True) + "\n")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _run_grid(cfg: Config, args, out: Path, fan_in: int) -> int:
    loads = cfg.list_of("loads", default=["0.1", "0.3", "0.5"], conv=float)
    seeds = cfg.seeds(args.seed)
    mice = cfg.integer("mice_flows", 50_000 if fan_in == 1 else 2_500)
    workers = args.workers
    cells = [(load, scheme, seed, mice, (2, 1), fan_in)
             for load in loads for scheme in _schemes(cfg, args)
             for seed in seeds]
    results = run_cells(cells, workers=workers)
    summary: dict[str, dict] = {}
    for (load, scheme, seed, *_rest), records in results.items():
        write_flow_csv(out / f"flows_{scheme}_{load}_{seed}.csv", records)
        pool = summary.setdefault(str(scheme), {}).setdefault(f"{load}", [])
        pool.extend(r.nfct_us for r in records if r.is_mice)
    table = {scheme: {load: summarize(vals) for load, vals in by_load.items()}
             for scheme, by_load in summary.items()}
    write_summary(out / "summary.json", table)
    print(json.dumps(table, indent=2, sort_keys=True))
    return 0


def cmd_sweep(cfg: Config, args, out: Path) -> int:
    return _run_grid(cfg, args, out, fan_in=1)


def cmd_incast(cfg: Config, args, out: Path) -> int:
    fan_in = cfg.integer("fan_in", 11)
    rc = _run_grid(cfg, args, out, fan_in=fan_in)
    conns = {str(s): count_payload_connections(s, fan_in=fan_in)
             for s in _schemes(cfg, args)}
    (out / "payload_connections.json").write_text(
        json.dumps(conns, indent=2, sort_keys=True) + "\n")
    return rc


def cmd_sort(cfg: Config, args, out: Path) -> int:
    spec = SortJobSpec(
        n_values=cfg.integer("sort_values", 20_000),
        n_slaves=cfg.integer("slaves", 11),
    )
    n_jobs = cfg.integer("jobs", 200)
    seed = cfg.seeds(args.seed)[0]
    summary = {}
    for scheme in _schemes(cfg, args):
        records = run_sort_series(scheme, n_jobs=n_jobs, seed=seed, spec=spec)
        with open(out / f"jct_{scheme}.csv", "w") as fh:
            fh.write("job,jct_us,correct\n")
            for i, rec in enumerate(records):
                fh.write(f"{i},{rec.jct_us:.1f},{int(rec.correct)}\n")
        jcts = sorted(r.jct_us for r in records)
        summary[str(scheme)] = {
            "n": len(records),
            "all_correct": all(r.correct for r in records),
            "mean_us": sum(jcts) / len(jcts),
            "max_us": jcts[-1],
        }
    (out / "sort_summary.json").write_text(json.dumps(summary, indent=2,
                                                      sort_keys=True) + "\n")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_bench_loopback(cfg: Config, args, out: Path) -> int:
    from .netbind import loopback_overhead_bench

    n = cfg.integer("bench_flows", 2_000)
    size = cfg.integer("bench_size", 1_000)
    base_port = cfg.integer("base_port", 9300)

    async def main():
        rows, table = [], {}
        for scheme in _schemes(cfg, args):
            stats = await loopback_overhead_bench(n, size, scheme,
                                                  base_port=base_port)
            rows.extend(stats.csv_rows())
            table[str(scheme)] = {"n": stats.n, "mean_us": stats.mean_us,
                                  "std_us": stats.std_us}
        return rows, table

    rows, table = asyncio.run(main())
    with open(out / "bench.csv", "w") as fh:
        fh.write("flow_id,mode,size_bytes,fct_us\n")
        fh.write("\n".join(rows) + "\n")
    (out / "bench_summary.json").write_text(json.dumps(table, indent=2,
                                                       sort_keys=True) + "\n")
    print(json.dumps(table, indent=2, sort_keys=True))
    return 0


COMMANDS = {
    "probe": cmd_probe,
    "sweep": cmd_sweep,
    "incast": cmd_incast,
    "sort": cmd_sort,
    "bench-loopback": cmd_bench_loopback,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="flowrep",
        description="Flow-replication experiments: probe, sweep, incast, "
                    "sort, bench-loopback")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="scenario config file")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config's seed list")
    parser.add_argument("--scheme", choices=["plain", "repflow", "repsyn"],
                        default=None, help="run a single scheme")
    parser.add_argument("--workers", type=int, default=2,
                        help="parallel cells for sweep/incast")
    args = parser.parse_args(argv)
    try:
        cfg = Config.load(args.config)
    except (OSError, ConfigError) as exc:
        print(f"flowrep: config error: {exc}", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        rc = COMMANDS[args.command](cfg, args, out)
    except (ConfigError, ValueError) as exc:
        print(f"flowrep: {exc}", file=sys.stderr)
        return 1
    _write_manifest(out, cfg, args)
    return rc


if __name__ == "__main__":
    sys.exit(main())
