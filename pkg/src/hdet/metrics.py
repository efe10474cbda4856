"""Run products on disk: the per-step metrics CSV, the flat key=value
summary, and the multi-run comparison report.

The CSV holds one row per recorded (step, rank) pair in nondecreasing step
order.  Fixed columns first, then one applied-LR column per channel (the
channel name is the column header), then delta/velocity/base columns per
channel that fill in only on controller sync rows.  Floats are written with
repr so equal runs produce byte-identical files and values round-trip
exactly.

A summary sits next to each CSV (same stem, ``.summary.txt``) and carries
the run lineage plus headline numbers: final loss, the crash marker, the
parameter-averaging count, and the final ensemble LR per channel.  compare
reads those pairs, refuses mismatched lineages, and emits gnuplot-style
plot data files, never rendered images.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .engine import RunResult, StepRecord, run
from .objectives import ObjectiveSpec
from .schedule import ConfigError, one_cycle_lr

CORE_COLUMNS = ("step", "rank", "loss", "sync", "controller",
                "interval_loss", "weight")

# rank-mean recorded loss above this multiple of its first recorded value
# marks the run as crashed at that step
CRASH_FACTOR = 10.0

SUMMARY_SUFFIX = ".summary.txt"

# summary fields that must agree for runs to be comparable
LINEAGE_FIELDS = ("objective", "global_seed", "total_steps")


def csv_columns(channel_names: Sequence[str]) -> tuple[str, ...]:
    names = tuple(channel_names)
    return (CORE_COLUMNS + names
            + tuple(f"delta:{n}" for n in names)
            + tuple(f"velocity:{n}" for n in names)
            + tuple(f"base:{n}" for n in names))


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, str):
        return value
    return repr(float(value))


def _opt_floats(values, count: int) -> tuple:
    if values is None:
        return (None,) * count
    return tuple(values)


def write_metrics_csv(path, result: RunResult) -> None:
    names = result.channel_names
    n = len(names)
    lines = [",".join(csv_columns(names))]
    for row in result.records:
        cells = [row.step, row.rank, row.loss, row.sync, row.controller,
                 row.interval_loss, row.weight]
        cells.extend(row.lrs)
        cells.extend(_opt_floats(row.deltas, n))
        cells.extend(_opt_floats(row.velocities, n))
        cells.extend(_opt_floats(row.bases, n))
        lines.append(",".join(_cell(c) for c in cells))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


@dataclass(frozen=True)
class MetricsTable:
    channel_names: tuple[str, ...]
    rows: list[StepRecord]


def _parse_opt(cell: str) -> float | None:
    return None if cell == "" else float(cell)


def read_metrics_csv(path) -> MetricsTable:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().split("\n") if ln]
    if not lines:
        raise ConfigError(f"{path}: empty metrics file")
    header = lines[0].split(",")
    if tuple(header[: len(CORE_COLUMNS)]) != CORE_COLUMNS:
        raise ConfigError(f"{path}: unrecognized metrics header {header[:7]}")
    extra = header[len(CORE_COLUMNS):]
    # channel-name columns run until the delta block; channel names come
    # from LR channels ("lr", "lr:<group>") and never start with "delta:"
    n, seen = 0, len(CORE_COLUMNS)
    while n < len(extra) and not extra[n].startswith("delta:"):
        n += 1
    names = tuple(extra[:n])
    if list(extra) != list(names) + [f"delta:{x}" for x in names] \
            + [f"velocity:{x}" for x in names] + [f"base:{x}" for x in names]:
        raise ConfigError(f"{path}: malformed channel columns {extra}")
    rows: list[StepRecord] = []
    for ln in lines[1:]:
        c = ln.split(",")
        lrs = tuple(float(x) for x in c[seen: seen + n])
        packs = []
        for k in range(3):
            lo = seen + (k + 1) * n
            block = c[lo: lo + n]
            packs.append(None if block[0] == "" else tuple(float(x) for x in block))
        rows.append(StepRecord(
            step=int(c[0]), rank=int(c[1]), loss=float(c[2]), sync=c[3] == "1",
            controller=c[4], interval_loss=_parse_opt(c[5]),
            weight=_parse_opt(c[6]), lrs=lrs,
            deltas=packs[0], velocities=packs[1], bases=packs[2]))
    return MetricsTable(channel_names=names, rows=rows)


# -- series and headline numbers ---------------------------------------------


def rank_mean_series(rows: Sequence[StepRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per recorded step: (steps, mean loss over ranks, mean LR per channel)."""
    by_step: dict[int, list[StepRecord]] = {}
    for row in rows:
        by_step.setdefault(row.step, []).append(row)
    steps = np.array(sorted(by_step), dtype=int)
    losses = np.array([np.mean([r.loss for r in by_step[s]]) for s in steps])
    lrs = np.array([np.mean([r.lrs for r in by_step[s]], axis=0) for s in steps])
    return steps, losses, lrs


def divergence_step(rows: Sequence[StepRecord]) -> int | None:
    """First recorded step whose rank-mean loss exceeds CRASH_FACTOR times
    the run's first recorded rank-mean loss, or None if that never happens."""
    steps, losses, _ = rank_mean_series(rows)
    if len(steps) == 0:
        return None
    bar = CRASH_FACTOR * losses[0]
    above = np.nonzero(losses > bar)[0]
    return int(steps[above[0]]) if len(above) else None


def objective_lineage(spec: ObjectiveSpec) -> str:
    return json.dumps(dataclasses.asdict(spec), sort_keys=True)


def summarize(cfg, result: RunResult) -> dict[str, str]:
    """Headline numbers and lineage for one finished run, all stringified.
    ``cfg`` is the ExperimentConfig the run was built from."""
    steps, losses, _ = rank_mean_series(result.records)
    window = losses[steps > cfg.total_steps - cfg.sync_interval]
    marker = divergence_step(result.records)
    nonfinite = [s for s in result.nonfinite_first_step.values() if s is not None]
    engaged: dict[str, float] = {}
    for rec in reversed(result.sync_records):
        engaged = {ch.name: ch.base_value for ch in rec.channels}
        break
    summary = {
        "preset": cfg.name,
        "objective": objective_lineage(cfg.objective),
        "global_seed": str(cfg.global_seed),
        "world_size": str(cfg.world_size),
        "total_steps": str(cfg.total_steps),
        "sync_interval": str(cfg.sync_interval),
        "execution_mode": cfg.execution_mode,
        "record_every": str(cfg.record_every),
        "spread": str(cfg.spread),
        "warm_start": str(cfg.warm_start),
        "auto_lr": str(cfg.auto_lr),
        "eta_max": repr(cfg.eta_max),
        "final_loss": repr(float(np.mean(window))),
        "divergence_step": "" if marker is None else str(marker),
        "first_nonfinite_step": str(min(nonfinite)) if nonfinite else "",
        "sync_count": str(result.call_counts.get(("reduce_mean", "params"), 0)),
    }
    for name in result.channel_names:
        final = engaged.get(name)
        if final is None:
            final = one_cycle_lr(cfg.total_steps, cfg.cycle())
        summary[f"final_eta:{name}"] = repr(float(final))
    return summary


def write_summary(path, summary: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, value in summary.items():
            fh.write(f"{key}={value}\n")


def load_summary(path) -> dict[str, str]:
    summary: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}: malformed summary line {line!r}")
            key, _, value = line.partition("=")
            summary[key] = value
    return summary


# -- running and comparing ----------------------------------------------------


@dataclass(frozen=True)
class ExperimentOutput:
    result: RunResult
    csv_path: str
    summary_path: str
    summary: dict[str, str]


def run_experiment(cfg, out_dir: str, stem: str | None = None) -> ExperimentOutput:
    """Run one config end to end and drop ``<stem>.csv`` plus
    ``<stem>.summary.txt`` into ``out_dir``."""
    from .config import resolve_checkpoint  # late import, config imports engine too

    checkpoint = resolve_checkpoint(cfg)
    result = run(cfg.to_run_config(checkpoint))
    if stem is None:
        stem = f"{cfg.name}-seed{cfg.global_seed}"
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, stem + ".csv")
    summary_path = os.path.join(out_dir, stem + SUMMARY_SUFFIX)
    write_metrics_csv(csv_path, result)
    summary = summarize(cfg, result)
    write_summary(summary_path, summary)
    return ExperimentOutput(result=result, csv_path=csv_path,
                            summary_path=summary_path, summary=summary)


@dataclass(frozen=True)
class CompareEntry:
    csv_path: str
    stem: str
    summary: dict[str, str]
    table: MetricsTable
    final_loss: float
    delta_vs_first: float


@dataclass(frozen=True)
class CompareReport:
    entries: tuple[CompareEntry, ...]
    text: str
    plot_paths: tuple[str, ...]


def _stem_of(csv_path: str) -> str:
    base = os.path.basename(csv_path)
    return base[:-4] if base.endswith(".csv") else base


def _summary_path_of(csv_path: str) -> str:
    return (csv_path[:-4] if csv_path.endswith(".csv") else csv_path) + SUMMARY_SUFFIX


def compare(csv_paths: Sequence[str], out_dir: str | None = None) -> CompareReport:
    """Cross-run report plus plot data files.

    Every CSV needs its sibling summary.  Runs must share objective, seed
    and step count; anything else is a different experiment and the mix is
    refused with the offending files and field named.
    """
    paths = list(csv_paths)
    if len(paths) < 2:
        raise ConfigError(
            f"need at least two metrics files to compare, got {len(paths)}")
    entries: list[CompareEntry] = []
    first_summary: dict[str, str] | None = None
    for path in paths:
        spath = _summary_path_of(path)
        if not os.path.exists(spath):
            raise ConfigError(f"{path}: missing run summary {spath}")
        summary = load_summary(spath)
        if first_summary is None:
            first_summary = summary
        else:
            for field in LINEAGE_FIELDS:
                if summary.get(field) != first_summary.get(field):
                    raise ConfigError(
                        f"refusing to compare: {field} differs between "
                        f"{paths[0]} ({first_summary.get(field)}) and "
                        f"{path} ({summary.get(field)})")
        table = read_metrics_csv(path)
        final = float(summary["final_loss"])
        entries.append(CompareEntry(
            csv_path=path, stem=_stem_of(path), summary=summary, table=table,
            final_loss=final, delta_vs_first=0.0))
    base = entries[0].final_loss
    entries = [dataclasses.replace(e, delta_vs_first=e.final_loss - base)
               for e in entries]

    plot_paths: list[str] = []
    for entry in entries:
        target_dir = out_dir if out_dir is not None else os.path.dirname(entry.csv_path)
        if target_dir:
            os.makedirs(target_dir, exist_ok=True)
        steps, losses, lrs = rank_mean_series(entry.table.rows)
        loss_path = os.path.join(target_dir, entry.stem + ".loss.dat")
        with open(loss_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("# step mean_loss\n")
            for s, l in zip(steps, losses):
                fh.write(f"{s} {float(l)!r}\n")
        lr_path = os.path.join(target_dir, entry.stem + ".lr.dat")
        with open(lr_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("# step " + " ".join(entry.table.channel_names) + "\n")
            for s, row in zip(steps, lrs):
                fh.write(f"{s} " + " ".join(repr(float(v)) for v in row) + "\n")
        plot_paths.extend([loss_path, lr_path])

    text = _report_text(entries)
    return CompareReport(entries=tuple(entries), text=text,
                         plot_paths=tuple(plot_paths))


def _report_text(entries: Sequence[CompareEntry]) -> str:
    headers = ("run", "preset", "final_loss", "divergence_step",
               "sync_count", "delta_vs_first")
    rows = [headers]
    for e in entries:
        marker = e.summary.get("divergence_step", "")
        rows.append((e.stem, e.summary.get("preset", "?"),
                     f"{e.final_loss:.6e}", marker if marker else "-",
                     e.summary.get("sync_count", "?"),
                     f"{e.delta_vs_first:+.6e}"))
    widths = [max(len(r[i]) for r in rows) for i in range(len(headers))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip()
             for row in rows]
    ranked = sorted(entries, key=lambda e: (e.final_loss if math.isfinite(e.final_loss)
                                            else float("inf"), e.stem))
    lines.append("ordering by final loss: "
                 + " < ".join(e.stem for e in ranked))
    return "\n".join(lines) + "\n"
