"""Record ingestion, quality control, normalization, and stratified splits.

CSV/TSV rows become MutationRecords; rows that fail parsing or
sequence/mutation validation are rejected with a logged reason, never
dropped silently. Accepted records are deduplicated, split 80/20 by
equal-frequency target bins, and normalized per source with scalers fit
on the training split only.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .mutenc import (
    Mutation,
    MutationError,
    canonical_mutation_text,
    parse_mutation_list,
    validate_against_sequence,
)


class FormatError(ValueError):
    """Input file structure is unusable (missing columns, unknown format)."""


class DataSizeError(ValueError):
    """Dataset too small or too degenerate for the requested operation."""


@dataclass
class MutationRecord:
    """One annotated measurement: a sequence, its substitutions, and a target value."""

    sequence: str
    mutations: list[Mutation]
    target: float
    source: str
    task: str

    def identity(self) -> tuple[str, str, str]:
        return (self.sequence, canonical_mutation_text(self.mutations), self.source)


@dataclass
class Scaler:
    """Per-source affine normalizer: transform(x) = (x - mean) / std."""

    source: str
    mean: float
    std: float

    def transform(self, x: float) -> float:
        return (x - self.mean) / self.std

    def inverse(self, y: float) -> float:
        return y * self.std + self.mean


@dataclass
class TaskDataset:
    """Normalized train/test records for one task plus the scalers that made them."""

    task: str
    train: list[MutationRecord]
    test: list[MutationRecord]
    scalers: dict[str, Scaler]
    rejects: list[str] = field(default_factory=list)


_REQUIRED = ("sequence", "mutation", "target", "source")


def read_records(path, fmt: str = "csv") -> tuple[list[MutationRecord], list[str]]:
    """Read one delimited file; returns (accepted records, rejection reasons).

    The header must carry sequence, mutation, target, source; a task
    column is optional and defaults to the file's stem. Every rejected
    row produces one "row N: reason" line.
    """
    if fmt not in ("csv", "tsv"):
        raise FormatError(f"unknown format {fmt!r}: expected csv or tsv")
    delim = "," if fmt == "csv" else "\t"
    default_task = os.path.splitext(os.path.basename(str(path)))[0]

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter=delim)
        header = reader.fieldnames or []
        missing = [c for c in _REQUIRED if c not in header]
        if missing:
            raise FormatError(f"{path}: missing required column(s) {', '.join(missing)}")
        has_task = "task" in header

        records: list[MutationRecord] = []
        rejects: list[str] = []
        for n, row in enumerate(reader, start=1):
            try:
                records.append(_parse_row(row, has_task, default_task))
            except (MutationError, ValueError) as exc:
                rejects.append(f"row {n}: {exc}")
    return records, rejects


def _parse_row(row: dict, has_task: bool, default_task: str) -> MutationRecord:
    seq = (row.get("sequence") or "").strip()
    raw_target = (row.get("target") or "").strip()
    source = (row.get("source") or "").strip()
    if not source:
        raise ValueError("missing source tag")
    if not raw_target or raw_target.lower() == "nan":
        raise ValueError("missing experimental value")
    try:
        target = float(raw_target)
    except ValueError:
        raise ValueError(f"unparseable target {raw_target!r}") from None
    if not math.isfinite(target):
        raise ValueError("missing experimental value")
    muts = parse_mutation_list(row.get("mutation") or "")
    validate_against_sequence(seq, muts)
    task = (row.get("task") or "").strip() if has_task else ""
    return MutationRecord(sequence=seq, mutations=muts, target=target,
                          source=source, task=task or default_task)


def dedup(records: list[MutationRecord]) -> list[MutationRecord]:
    """Keep the first occurrence of each (sequence, mutation text, source) key."""
    seen: set[tuple[str, str, str]] = set()
    out = []
    for rec in records:
        key = rec.identity()
        if key not in seen:
            seen.add(key)
            out.append(rec)
    return out


def fit_scalers(train_records: list[MutationRecord]) -> dict[str, Scaler]:
    """Per-source mean and population std over training targets."""
    by_source: dict[str, list[float]] = {}
    for rec in train_records:
        by_source.setdefault(rec.source, []).append(rec.target)
    scalers: dict[str, Scaler] = {}
    for source in sorted(by_source):
        vals = np.asarray(by_source[source], dtype=np.float64)
        std = float(vals.std())  # population, ddof=0
        if len(vals) < 2 or std == 0.0:
            raise DataSizeError(
                f"source {source!r} is degenerate: needs >=2 records with non-identical targets")
        scalers[source] = Scaler(source=source, mean=float(vals.mean()), std=std)
    return scalers


def stratified_split(records: list[MutationRecord], ratio: float, bins: int,
                     seed: int) -> tuple[list[MutationRecord], list[MutationRecord]]:
    """Split records into equal-frequency target bins, then `ratio` of each bin to train.

    Per-bin train counts are allocated by largest fractional remainder so
    the global train fraction lands on round(n * ratio) exactly; each bin
    stays within one record of proportionality.
    """
    if bins < 1:
        raise DataSizeError(f"bins must be >= 1, got {bins}")
    if len(records) < bins:
        raise DataSizeError(f"{len(records)} records cannot fill {bins} bins")
    order = sorted(range(len(records)), key=lambda i: (records[i].target, i))
    chunks = np.array_split(np.asarray(order), bins)
    quota = [len(c) * ratio for c in chunks]
    base = [int(math.floor(q)) for q in quota]
    total = int(math.floor(len(records) * ratio + 0.5))
    by_remainder = sorted(range(len(chunks)), key=lambda i: (base[i] - quota[i], i))
    n_train = list(base)
    for i in by_remainder[:total - sum(base)]:
        n_train[i] += 1

    rng = np.random.default_rng(seed)
    train: list[MutationRecord] = []
    test: list[MutationRecord] = []
    for k, chunk in enumerate(chunks):
        perm = rng.permutation(len(chunk))
        for j, p in enumerate(perm):
            (train if j < n_train[k] else test).append(records[int(chunk[p])])
    return train, test


def _normalize(records: list[MutationRecord], scalers: dict[str, Scaler]) -> list[MutationRecord]:
    out = []
    for rec in records:
        scaler = scalers.get(rec.source)
        if scaler is None:
            raise DataSizeError(
                f"source {rec.source!r} appears outside the training split; no scaler fit for it")
        out.append(MutationRecord(sequence=rec.sequence, mutations=rec.mutations,
                                  target=scaler.transform(rec.target),
                                  source=rec.source, task=rec.task))
    return out


def build_task_dataset_from_records(records: list[MutationRecord], task: str, seed: int,
                                    ratio: float = 0.8, bins: int = 10,
                                    rejects: list[str] | None = None) -> TaskDataset:
    """QC'd records for one task -> dedup -> split -> train-fit scalers -> normalize."""
    mine = [r for r in records if r.task == task]
    if not mine:
        raise DataSizeError(f"no valid records for task {task!r}")
    mine = dedup(mine)
    use_bins = min(bins, len(mine))
    train, test = stratified_split(mine, ratio, use_bins, seed)
    scalers = fit_scalers(train)
    return TaskDataset(task=task, train=_normalize(train, scalers),
                       test=_normalize(test, scalers), scalers=scalers,
                       rejects=list(rejects or []))


def build_task_dataset(files, task: str, seed: int, ratio: float = 0.8,
                       bins: int = 10) -> TaskDataset:
    """Full pipeline from delimited files to a normalized TaskDataset."""
    records: list[MutationRecord] = []
    rejects: list[str] = []
    for path in files:
        fmt = "tsv" if str(path).endswith(".tsv") else "csv"
        recs, rej = read_records(path, fmt)
        records.extend(recs)
        rejects.extend(f"{os.path.basename(str(path))} {line}" for line in rej)
    return build_task_dataset_from_records(records, task, seed, ratio, bins, rejects)


# ---------------------------------------------------------------------------
# directory serialization
# ---------------------------------------------------------------------------

def _write_records_csv(path, records: list[MutationRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sequence", "mutation", "target", "source", "task"])
        for rec in records:
            writer.writerow([rec.sequence, canonical_mutation_text(rec.mutations),
                             repr(rec.target), rec.source, rec.task])


def save_task_dataset(ds: TaskDataset, outdir) -> None:
    """Write train.csv, test.csv, scalers.json, rejects.log into `outdir`."""
    os.makedirs(outdir, exist_ok=True)
    _write_records_csv(os.path.join(outdir, "train.csv"), ds.train)
    _write_records_csv(os.path.join(outdir, "test.csv"), ds.test)
    payload = {s.source: {"mean": s.mean, "std": s.std} for s in ds.scalers.values()}
    with open(os.path.join(outdir, "scalers.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(os.path.join(outdir, "rejects.log"), "w", encoding="utf-8") as fh:
        for line in ds.rejects:
            fh.write(line + "\n")


def load_task_dataset(indir, task: str | None = None) -> TaskDataset:
    """Read a directory written by save_task_dataset; targets stay normalized."""
    def read_split(name):
        recs, rej = read_records(os.path.join(indir, name), "csv")
        if rej:
            raise FormatError(f"{indir}/{name}: previously-saved split fails QC: {rej[0]}")
        return recs

    train = read_split("train.csv")
    test = read_split("test.csv")
    with open(os.path.join(indir, "scalers.json"), encoding="utf-8") as fh:
        payload = json.load(fh)
    scalers = {src: Scaler(source=src, mean=v["mean"], std=v["std"])
               for src, v in payload.items()}
    rejects_path = os.path.join(indir, "rejects.log")
    rejects = []
    if os.path.exists(rejects_path):
        with open(rejects_path, encoding="utf-8") as fh:
            rejects = [line.rstrip("\n") for line in fh]
    name = task or (train[0].task if train else (test[0].task if test else ""))
    return TaskDataset(task=name, train=train, test=test, scalers=scalers, rejects=rejects)
