"""Metrics reports: a JSON summary plus CSV streams, written so that the
same configuration and seed always produce byte-identical files."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

SUMMARY_FILE = "summary.json"
TIMELINE_FILE = "timeline.csv"
PAIRS_FILE = "pairs.csv"
VERDICTS_FILE = "verdicts.csv"
LEAKED_FILE = "leaked.csv"


@dataclass
class MetricsReport:
    experiment: str
    seed: int
    quiesced: bool = False
    converged: Optional[bool] = None
    duration_us: int = 0
    # (bucket_start_us, instance, packets, passed, dropped, other)
    timeline: list[tuple] = field(default_factory=list)
    # (src, dst, sent_msgs, sent_bytes, delivered_msgs, delivered_bytes, dropped)
    pairs: list[tuple] = field(default_factory=list)
    # (virtual_time, instance, flow, verdict)
    verdicts: list[tuple] = field(default_factory=list)
    # (instance, leaked, expected)
    leaked: list[tuple] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_summary_dict(self) -> dict:
        body = {
            "experiment": self.experiment,
            "seed": self.seed,
            "quiesced": self.quiesced,
            "converged": self.converged,
            "duration_us": self.duration_us,
            "replication_bytes_total": sum(row[3] for row in self.pairs),
            "replication_messages_total": sum(row[2] for row in self.pairs),
        }
        body.update(self.summary)
        return body

    def write(self, out_dir: Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / SUMMARY_FILE, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_summary_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")
        _write_csv(out_dir / TIMELINE_FILE,
                   ("bucket_us", "instance", "packets", "passed", "dropped", "other"),
                   sorted(self.timeline))
        _write_csv(out_dir / PAIRS_FILE,
                   ("src", "dst", "sent_msgs", "sent_bytes",
                    "delivered_msgs", "delivered_bytes", "dropped_msgs"),
                   sorted(self.pairs))
        _write_csv(out_dir / VERDICTS_FILE,
                   ("virtual_time_us", "instance", "flow", "verdict"),
                   self.verdicts)
        if self.leaked:
            _write_csv(out_dir / LEAKED_FILE,
                       ("instance", "leaked", "expected"),
                       sorted(self.leaked))


def _write_csv(path: Path, header: tuple, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def build_timeline(verdicts, bucket_us: int) -> list[tuple]:
    """Aggregate the verdict stream into per-instance throughput buckets."""
    buckets: dict[tuple[int, int], list[int]] = {}
    for at, instance, _flow, verdict in verdicts:
        key = ((at // bucket_us) * bucket_us, instance)
        cell = buckets.setdefault(key, [0, 0, 0, 0])
        cell[0] += 1
        if verdict == "passed" or verdict.startswith("translated"):
            cell[1] += 1
        elif verdict == "dropped":
            cell[2] += 1
        else:
            cell[3] += 1
    return [(start, inst, *cells) for (start, inst), cells in sorted(buckets.items())]


def pair_rows(sim) -> list[tuple]:
    rows = []
    for (src, dst), stats in sorted(sim.pair_stats.items()):
        rows.append((src, dst, stats.sent_messages, stats.sent_bytes,
                     stats.delivered_messages, stats.delivered_bytes,
                     stats.dropped_messages))
    return rows
