"""Figure rendering for run reports.

Plots come strictly from the delimited files a run wrote, never from
in-process state, so any archived run directory can be re-rendered.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .report import LEAKED_FILE, PAIRS_FILE, SUMMARY_FILE, TIMELINE_FILE  # noqa: E402


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def render_run(run_dir, out_dir=None) -> list[Path]:
    """Render every applicable figure for a run directory; returns the
    files written."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    summary_path = run_dir / SUMMARY_FILE
    summary = {}
    if summary_path.exists():
        summary = json.loads(summary_path.read_text())
    written = []

    timeline = run_dir / TIMELINE_FILE
    if timeline.exists():
        rows = _read_csv(timeline)
        if rows:
            written.append(_plot_timeline(rows, summary, out_dir))

    pairs = run_dir / PAIRS_FILE
    if pairs.exists():
        rows = _read_csv(pairs)
        if rows:
            written.append(_plot_pairs(rows, summary, out_dir))

    leaked = run_dir / LEAKED_FILE
    if leaked.exists():
        rows = _read_csv(leaked)
        if rows:
            written.append(_plot_leaked(rows, summary, out_dir))

    return written


def _plot_timeline(rows, summary, out_dir: Path) -> Path:
    instances = sorted({int(r["instance"]) for r in rows})
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for inst in instances:
        points = [(int(r["bucket_us"]) / 1000.0, int(r["packets"]))
                  for r in rows if int(r["instance"]) == inst]
        points.sort()
        ax.plot([p[0] for p in points], [p[1] for p in points],
                marker=".", markersize=3, linewidth=1, label=f"instance {inst}")
    ax.set_xlabel("virtual time (ms)")
    ax.set_ylabel("packets per bucket")
    ax.set_title(f"{summary.get('experiment', 'run')} throughput")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = out_dir / "throughput_timeline.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _plot_pairs(rows, summary, out_dir: Path) -> Path:
    labels = [f"{r['src']}->{r['dst']}" for r in rows]
    sent = [int(r["sent_bytes"]) for r in rows]
    delivered = [int(r["delivered_bytes"]) for r in rows]
    x = range(len(labels))
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(labels)), 3.5))
    ax.bar([i - 0.2 for i in x], sent, width=0.4, label="sent")
    ax.bar([i + 0.2 for i in x], delivered, width=0.4, label="delivered")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel("bytes")
    ax.set_title("state-channel bytes per ordered pair")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = out_dir / "replication_bytes.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _plot_leaked(rows, summary, out_dir: Path) -> Path:
    instances = [r["instance"] for r in rows]
    leaked = [int(r["leaked"]) for r in rows]
    expected = [float(r["expected"]) for r in rows]
    x = range(len(instances))
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.bar([i - 0.2 for i in x], leaked, width=0.4, label="measured")
    ax.bar([i + 0.2 for i in x], expected, width=0.4, label="replay expectation")
    ax.set_xticks(list(x))
    ax.set_xticklabels([f"instance {i}" for i in instances], fontsize=8)
    ax.set_ylabel("packets past the centralized crossing")
    ax.set_title("leaked packets")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = out_dir / "leaked_packets.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
