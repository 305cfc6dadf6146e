"""Metrics file (one observation per row) and the summary derived from it.

Rows are ``round,client,domain,split,metric,value,seed,strategy``. A round's
rows are formatted in memory and appended with a single write, so an
aborted run leaves only whole rounds behind. Wall-clock figures are kept
out of the file so that reruns are byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

HEADER = ("round", "client", "domain", "split", "metric", "value", "seed", "strategy")


class MetricsError(ValueError):
    pass


def _fmt(value) -> str:
    if isinstance(value, (int,)) and not isinstance(value, bool):
        return str(value)
    return repr(float(value))


class MetricsWriter:
    def __init__(self, path, truncate: bool = True):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if truncate or not self.path.exists():
            self.path.write_bytes((",".join(HEADER) + "\n").encode())

    def write_rows(self, rows) -> None:
        buf = io.StringIO()
        for row in rows:
            if len(row) != len(HEADER):
                raise MetricsError(f"metrics row needs {len(HEADER)} fields, got {len(row)}")
            buf.write(",".join(str(c) for c in row) + "\n")
        with open(self.path, "ab") as fh:
            fh.write(buf.getvalue().encode())
            fh.flush()

    def write_round(self, record, seed: int, strategy: str) -> None:
        rows = []
        for c in record.clients:
            base = (record.round, c["client"], c["domain"])
            rows.append(base + ("test", "accuracy", _fmt(c["accuracy"]), seed, strategy))
            for key in sorted(c["train"]):
                rows.append(base + ("train", key, _fmt(c["train"][key]), seed, strategy))
            for key in ("params_up", "params_down", "bytes_up", "bytes_down"):
                rows.append(base + ("comm", key, _fmt(c[key]), seed, strategy))
        self.write_rows(rows)


@dataclass(frozen=True)
class Row:
    round: int
    client: int
    domain: str
    split: str
    metric: str
    value: float
    seed: int
    strategy: str


def read_metrics(path) -> list[Row]:
    """Parse a metrics file; malformed content raises with its line number."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"metrics file not found: {path}")
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise MetricsError(f"{path}:1: empty metrics file")
    if tuple(lines[0].split(",")) != HEADER:
        raise MetricsError(f"{path}:1: unexpected header {lines[0]!r}")
    rows = []
    for lineno, cells in enumerate(csv.reader(lines[1:]), start=2):
        if not cells:
            continue
        if len(cells) != len(HEADER):
            raise MetricsError(f"{path}:{lineno}: expected {len(HEADER)} fields, found {len(cells)}")
        try:
            row = Row(int(cells[0]), int(cells[1]), cells[2], cells[3], cells[4], float(cells[5]), int(cells[6]), cells[7])
        except ValueError as exc:
            raise MetricsError(f"{path}:{lineno}: {exc}") from None
        if not math.isfinite(row.value):
            raise MetricsError(f"{path}:{lineno}: non-finite value")
        rows.append(row)
    if not rows:
        raise MetricsError(f"{path}:2: metrics file has a header but no rows")
    return rows


def merge_files(paths, out) -> Path:
    """Concatenate per-seed files (in the given order) under one header."""
    out = Path(out)
    chunks = [(",".join(HEADER) + "\n").encode()]
    for p in paths:
        lines = Path(p).read_bytes().split(b"\n", 1)
        if lines[0].decode() != ",".join(HEADER):
            raise MetricsError(f"{p}:1: unexpected header")
        chunks.append(lines[1] if len(lines) > 1 else b"")
    out.write_bytes(b"".join(chunks))
    return out


def _mean_std(values: list[float]) -> dict:
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return {"mean": statistics.fmean(values), "std": std, "n": len(values)}


def summarize(rows: list[Row]) -> dict:
    """Final-round test accuracy per strategy: mean and std over seeds, per
    domain and for the per-seed domain average."""
    by_strategy: dict[str, list[Row]] = defaultdict(list)
    for r in rows:
        if r.split == "test" and r.metric == "accuracy":
            by_strategy[r.strategy].append(r)
    if not by_strategy:
        raise MetricsError("no test accuracy rows to summarize")
    out = {}
    for strategy, srows in sorted(by_strategy.items()):
        final_round = {}
        for r in srows:
            final_round[r.seed] = max(final_round.get(r.seed, r.round), r.round)
        per_domain: dict[str, list[float]] = defaultdict(list)
        per_seed: dict[int, list[float]] = defaultdict(list)
        order = []
        for r in sorted(srows, key=lambda r: (r.seed, r.client)):
            if r.round != final_round[r.seed]:
                continue
            if r.domain not in order:
                order.append(r.domain)
            per_domain[r.domain].append(r.value)
            per_seed[r.seed].append(r.value)
        out[strategy] = {
            "seeds": sorted(final_round),
            "rounds": max(final_round.values()),
            "domains": {d: _mean_std(per_domain[d]) for d in order},
            "average": _mean_std([statistics.fmean(v) for _, v in sorted(per_seed.items())]),
        }
    return out


def summarize_file(path) -> dict:
    return summarize(read_metrics(path))


def format_table(summary: dict) -> str:
    """Plain-text table, one row per strategy."""
    domains = []
    for s in summary.values():
        for d in s["domains"]:
            if d not in domains:
                domains.append(d)
    head = ["strategy"] + domains + ["avg"]
    lines = ["  ".join(f"{h:>14}" for h in head)]
    for name, s in summary.items():
        cells = [name]
        for d in domains:
            v = s["domains"].get(d)
            cells.append(f"{v['mean']:.2f}±{v['std']:.2f}" if v else "-")
        cells.append(f"{s['average']['mean']:.2f}±{s['average']['std']:.2f}")
        lines.append("  ".join(f"{c:>14}" for c in cells))
    return "\n".join(lines)


def write_summary(summary: dict, path, meta: dict | None = None) -> None:
    payload = {"meta": meta or {}, "results": summary}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
