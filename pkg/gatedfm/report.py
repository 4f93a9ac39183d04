"""
Run reports.

A `RunReport` collects what one stage of training did: per-epoch losses and
AUCs, the final α histogram, the share of interactions kept per order, and
wall-clock time per stage.  It renders as plain text for people or JSON for
tools, and the JSON form loads back.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    eval_loss: Optional[float] = None
    eval_auc: Optional[float] = None
    kept: Dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0


@dataclass
class Histogram:
    edges: List[float]
    counts: List[int]

    def centers(self) -> List[float]:
        return [(a + b) / 2 for a, b in zip(self.edges, self.edges[1:])]


@dataclass
class RunReport:
    stage: str
    epochs: List[EpochRecord] = field(default_factory=list)
    alpha_histogram: Optional[Histogram] = None
    kept: Dict[str, float] = field(default_factory=dict)
    open_counts: Dict[str, Tuple[int, int]] = field(default_factory=dict)
    wall_clock: Dict[str, float] = field(default_factory=dict)
    final: Dict[str, float] = field(default_factory=dict)
    notes: Dict[str, str] = field(default_factory=dict)

    def merge(self, other: "RunReport") -> "RunReport":
        """Combine stage reports; epochs and metrics of *other* follow ours."""
        return RunReport(
            stage=f"{self.stage}+{other.stage}",
            epochs=self.epochs + other.epochs,
            alpha_histogram=other.alpha_histogram or self.alpha_histogram,
            kept={**self.kept, **other.kept},
            open_counts={**self.open_counts, **other.open_counts},
            wall_clock={**self.wall_clock, **other.wall_clock},
            final={**self.final, **other.final},
            notes={**self.notes, **other.notes},
        )


def _fmt(value: Optional[float], spec: str = ".5f") -> str:
    return "-" if value is None else format(value, spec)


def format_plain(report: RunReport) -> str:
    lines = [
        f"Run Report  (stage: {report.stage})",
        "=" * 56,
    ]
    if report.epochs:
        lines.append("\n[epochs]")
        lines.append("  epoch  train_loss  eval_loss  eval_auc  seconds")
        for r in report.epochs:
            lines.append(
                f"  {r.epoch:>5}  {_fmt(r.train_loss):>10}  {_fmt(r.eval_loss):>9}  "
                f"{_fmt(r.eval_auc):>8}  {r.seconds:>7.1f}"
            )
    if report.kept:
        lines.append("\n[kept interactions]")
        for order, frac in report.kept.items():
            opened, total = report.open_counts.get(order, (None, None))
            detail = f"  ({opened}/{total})" if opened is not None else ""
            lines.append(f"  {order}: {frac * 100:.1f}%{detail}")
    if report.final:
        lines.append("\n[final]")
        for key, value in report.final.items():
            lines.append(f"  {key}: {value:.6f}")
    if report.alpha_histogram is not None:
        h = report.alpha_histogram
        lines.append("\n[alpha histogram]")
        for center, count in zip(h.centers(), h.counts):
            lines.append(f"  {center:+.4f}  {count}")
    if report.wall_clock:
        lines.append("\n[wall clock]")
        for stage, seconds in report.wall_clock.items():
            lines.append(f"  {stage}: {seconds:.1f}s")
    if report.notes:
        lines.append("\n[notes]")
        for key, value in report.notes.items():
            lines.append(f"  {key}: {value}")
    return "\n".join(lines)


def format_json(report: RunReport) -> str:
    return json.dumps(asdict(report), indent=2)


def format_report(report: RunReport, fmt: str = "plain") -> str:
    if fmt == "json":
        return format_json(report)
    return format_plain(report)


def load_report(text: str) -> RunReport:
    data = json.loads(text)
    hist = data.get("alpha_histogram")
    return RunReport(
        stage=data["stage"],
        epochs=[EpochRecord(**e) for e in data.get("epochs", [])],
        alpha_histogram=Histogram(**hist) if hist else None,
        kept=data.get("kept", {}),
        open_counts={k: tuple(v) for k, v in data.get("open_counts", {}).items()},
        wall_clock=data.get("wall_clock", {}),
        final=data.get("final", {}),
        notes=data.get("notes", {}),
    )


# ---------------------------------------------------------------------------
# Plot data
# ---------------------------------------------------------------------------

def two_column_text(xs: Sequence[float], ys: Sequence[float], header: Tuple[str, str]) -> str:
    lines = [f"{header[0]}\t{header[1]}"]
    lines += [f"{x!r}\t{y!r}" for x, y in zip(map(float, xs), map(float, ys))]
    return "\n".join(lines) + "\n"


def histogram_text(hist: Histogram) -> str:
    return two_column_text(hist.centers(), hist.counts, ("bin_center", "count"))
