"""Long-format longitudinal item-response data: ingestion, validation, indexing.

One row per (subject, item, time) observation; missing responses are simply
absent rows.  Responses must arrive integer-coded 0..L-1; items flagged
``reversed`` are recoded l -> L-1-l at load time (and written back on the
raw scale by :func:`save_long_csv`).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence


class SchemaError(ValueError):
    """A required column is missing from the file header."""


class RowError(ValueError):
    """A row failed to parse or validate; carries the 1-based line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class ItemDef:
    item_id: str
    n_levels: int
    reversed: bool = False

    def __post_init__(self):
        if self.n_levels < 2:
            raise ValueError(f"item {self.item_id!r}: n_levels must be >= 2")


@dataclass(frozen=True)
class Observation:
    subject_id: str
    item_id: str
    time: float
    response: int


@dataclass(frozen=True)
class ColumnSchema:
    """Maps logical fields to CSV column names."""

    subject: str = "subject"
    item: str = "item"
    time: str = "time"
    response: str = "response"
    subject_covariates: tuple[str, ...] = ()
    row_covariates: tuple[str, ...] = ()


@dataclass
class LongDataset:
    items: tuple[ItemDef, ...]
    observations: tuple[Observation, ...]
    # subject_id -> {covariate name -> value}; time-independent
    subject_covariates: dict[str, dict[str, float]] = field(default_factory=dict)
    # aligned with observations; time-dependent covariates, {} when none
    row_covariates: tuple[Mapping[str, float], ...] = ()

    def __post_init__(self):
        ids = [it.item_id for it in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("item ids must be unique")
        if not self.row_covariates:
            self.row_covariates = tuple({} for _ in self.observations)
        if len(self.row_covariates) != len(self.observations):
            raise ValueError("row_covariates must align with observations")
        item_map = {it.item_id: it for it in self.items}
        for obs in self.observations:
            it = item_map.get(obs.item_id)
            if it is None:
                raise ValueError(f"observation references unknown item {obs.item_id!r}")
            if not 0 <= obs.response <= it.n_levels - 1:
                raise ValueError(
                    f"response {obs.response} out of range 0..{it.n_levels - 1} "
                    f"for item {obs.item_id!r}"
                )

    @property
    def item_map(self) -> dict[str, ItemDef]:
        return {it.item_id: it for it in self.items}

    def subject_ids(self) -> list[str]:
        """All subject ids (observed or covariate-only), sorted."""
        ids = {o.subject_id for o in self.observations}
        ids.update(self.subject_covariates.keys())
        return sorted(ids)

    @property
    def n_subjects(self) -> int:
        return len({o.subject_id for o in self.observations})

    def counts(self) -> dict[tuple[str, str], int]:
        """n_ik: observation count per (subject, item)."""
        out: dict[tuple[str, str], int] = {}
        for o in self.observations:
            key = (o.subject_id, o.item_id)
            out[key] = out.get(key, 0) + 1
        return out


def _parse_float(raw: str, column: str, line: int) -> float:
    try:
        return float(raw)
    except ValueError:
        raise RowError(f"could not parse {column}={raw!r} as a number", line) from None


def load_long_csv(path, schema: ColumnSchema, items: Sequence[ItemDef]) -> LongDataset:
    """Read a long-format UTF-8 CSV into a LongDataset.

    Reversed items are recoded l -> L-1-l.  Row order is preserved.  Raises
    SchemaError for missing columns and RowError (with the line number) for
    unparseable values or out-of-range responses.
    """
    items = tuple(items)
    item_map = {it.item_id: it for it in items}
    observations: list[Observation] = []
    row_covs: list[dict[str, float]] = []
    subj_covs: dict[str, dict[str, float]] = {}

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = [schema.subject, schema.item, schema.time, schema.response]
        needed += list(schema.subject_covariates) + list(schema.row_covariates)
        missing = [c for c in needed if c not in header]
        if missing:
            raise SchemaError(f"missing column(s) in {path}: {', '.join(missing)}")

        for line, row in enumerate(reader, start=2):
            sid = row[schema.subject]
            item_id = row[schema.item]
            item = item_map.get(item_id)
            if item is None:
                raise RowError(f"unknown item {item_id!r}", line)
            t = _parse_float(row[schema.time], schema.time, line)
            resp_raw = _parse_float(row[schema.response], schema.response, line)
            if resp_raw != int(resp_raw):
                raise RowError(f"response {resp_raw} is not an integer", line)
            resp = int(resp_raw)
            if not 0 <= resp <= item.n_levels - 1:
                raise RowError(
                    f"response {resp} out of range 0..{item.n_levels - 1} "
                    f"for item {item_id!r}",
                    line,
                )
            if item.reversed:
                resp = item.n_levels - 1 - resp
            observations.append(Observation(sid, item_id, t, resp))
            row_covs.append(
                {c: _parse_float(row[c], c, line) for c in schema.row_covariates}
            )
            covs = {c: _parse_float(row[c], c, line) for c in schema.subject_covariates}
            subj_covs.setdefault(sid, covs)

    return LongDataset(
        items=items,
        observations=tuple(observations),
        subject_covariates=subj_covs,
        row_covariates=tuple(row_covs),
    )


def save_long_csv(ds: LongDataset, path, schema: ColumnSchema = ColumnSchema()) -> None:
    """Write a dataset back to long-format CSV on the raw response scale.

    Reversed items are un-recoded so that load_long_csv(save_long_csv(ds))
    reproduces ds.  Floats are written with 17 significant digits.
    """
    item_map = ds.item_map
    cols = [schema.subject, schema.item, schema.time, schema.response]
    cols += list(schema.subject_covariates) + list(schema.row_covariates)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for obs, rc in zip(ds.observations, ds.row_covariates):
            item = item_map[obs.item_id]
            resp = item.n_levels - 1 - obs.response if item.reversed else obs.response
            row = [obs.subject_id, obs.item_id, format(obs.time, ".17g"), resp]
            sc = ds.subject_covariates.get(obs.subject_id, {})
            row += [format(sc[c], ".17g") for c in schema.subject_covariates]
            row += [format(rc[c], ".17g") for c in schema.row_covariates]
            writer.writerow(row)


@dataclass(frozen=True)
class ValidationEntry:
    level: str  # "warning" | "error"
    message: str
    row: int | None = None


@dataclass
class ValidationReport:
    entries: list[ValidationEntry] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.entries

    def errors(self) -> list[ValidationEntry]:
        return [e for e in self.entries if e.level == "error"]

    def warnings(self) -> list[ValidationEntry]:
        return [e for e in self.entries if e.level == "warning"]


def validate(ds: LongDataset) -> ValidationReport:
    """Consistency report: the caller decides severity."""
    report = ValidationReport()
    observed_subjects = {o.subject_id for o in ds.observations}

    for sid in sorted(set(ds.subject_covariates) - observed_subjects):
        report.entries.append(
            ValidationEntry("warning", f"subject {sid!r} has covariates but no observations")
        )

    observed_items = {o.item_id for o in ds.observations}
    for it in ds.items:
        if it.item_id not in observed_items:
            report.entries.append(
                ValidationEntry("warning", f"item {it.item_id!r} is never observed")
            )

    for idx, obs in enumerate(ds.observations):
        if not math.isfinite(obs.time):
            report.entries.append(
                ValidationEntry("error", f"non-finite time for subject {obs.subject_id!r}", idx)
            )

    cov_names = set()
    for covs in ds.subject_covariates.values():
        cov_names.update(covs)
    for sid in sorted(observed_subjects):
        covs = ds.subject_covariates.get(sid, {})
        for name in sorted(cov_names - set(covs)):
            report.entries.append(
                ValidationEntry("warning", f"subject {sid!r} is missing covariate {name!r}")
            )
    return report
