"""Observational datasets: schema, CSV persistence, splitting and stratification.

A :class:`Dataset` is column-major and immutable. Every column carries a role
(``rcp``, ``context`` or ``kpi``) and a value kind that fixes its domain.
On disk a dataset is two files: ``<stem>.csv`` with the records and
``<stem>.meta.json`` with the schema and provenance.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

import numpy as np

from xappconflict.errors import DataError, DomainError, ParseError

ROLES = ("rcp", "context", "kpi")
KINDS = ("discrete-set", "integer-range", "real")
META_FORMAT = "xappconflict.dataset/1"


@dataclass(frozen=True)
class Column:
    """Descriptor for one dataset column.

    ``levels`` is required for ``discrete-set`` columns. ``bounds`` is an
    inclusive ``(lo, hi)`` pair; either side may be ``None``.
    """

    name: str
    role: str
    kind: str
    levels: tuple | None = None
    bounds: tuple | None = None
    unit: str = ""

    def __post_init__(self):
        if self.role not in ROLES:
            raise DataError(f"column {self.name!r}: unknown role {self.role!r}")
        if self.kind not in KINDS:
            raise DataError(f"column {self.name!r}: unknown value kind {self.kind!r}")
        if self.kind == "discrete-set" and not self.levels:
            raise DataError(f"column {self.name!r}: discrete-set column needs levels")
        if self.levels is not None:
            object.__setattr__(self, "levels", tuple(self.levels))
        if self.bounds is not None:
            object.__setattr__(self, "bounds", tuple(self.bounds))

    @property
    def is_integer(self) -> bool:
        if self.kind == "integer-range":
            return True
        if self.kind == "discrete-set":
            return all(isinstance(v, (int, np.integer)) for v in self.levels)
        return False

    def check(self, values: np.ndarray) -> None:
        """Raise :class:`DomainError` if any value lies outside the column domain."""
        if self.kind == "discrete-set":
            bad = ~np.isin(values, np.asarray(self.levels))
        else:
            bad = ~np.isfinite(values) if values.dtype.kind == "f" else np.zeros(len(values), bool)
            if self.kind == "integer-range" and values.dtype.kind == "f":
                bad |= values != np.round(values)
            if self.bounds is not None:
                lo, hi = self.bounds
                if lo is not None:
                    bad |= values < lo
                if hi is not None:
                    bad |= values > hi
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DomainError(f"column {self.name!r}: value {values[i]!r} at record {i} outside its domain")

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"name": self.name, "role": self.role, "kind": self.kind}
        if self.levels is not None:
            d["levels"] = list(self.levels)
        if self.bounds is not None:
            d["bounds"] = list(self.bounds)
        if self.unit:
            d["unit"] = self.unit
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Column":
        return cls(
            name=d["name"],
            role=d["role"],
            kind=d["kind"],
            levels=tuple(d["levels"]) if d.get("levels") is not None else None,
            bounds=tuple(d["bounds"]) if d.get("bounds") is not None else None,
            unit=d.get("unit", ""),
        )


class Dataset:
    """Immutable column-major table of episode records."""

    def __init__(
        self,
        schema: Sequence[Column],
        columns: Mapping[str, Iterable],
        episode_ids: Iterable[int] | None = None,
        provenance: Mapping | None = None,
    ):
        schema = tuple(schema)
        names = [c.name for c in schema]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate column names in schema: {names}")
        if "episode_id" in names:
            raise DataError("'episode_id' is reserved")
        roles = {c.role for c in schema}
        if "rcp" not in roles or "kpi" not in roles:
            raise DataError("schema needs at least one rcp column and one kpi column")
        missing = [n for n in names if n not in columns]
        if missing:
            raise DataError(f"missing values for columns {missing}")
        extra = [n for n in columns if n not in names]
        if extra:
            raise DataError(f"columns {extra} are not declared in the schema")

        data = {}
        n = None
        for col in schema:
            arr = np.asarray(columns[col.name])
            if arr.ndim != 1:
                raise DataError(f"column {col.name!r} must be one-dimensional")
            if n is None:
                n = len(arr)
            elif len(arr) != n:
                raise DataError(f"column {col.name!r} has {len(arr)} values, expected {n}")
            if col.is_integer and arr.dtype.kind == "f" and not np.all(arr == np.round(arr)):
                raise DomainError(f"column {col.name!r} holds non-integer values")
            arr = arr.astype(np.int64 if col.is_integer else np.float64)
            col.check(arr)
            arr.setflags(write=False)
            data[col.name] = arr
        n = n or 0
        ids = np.arange(n, dtype=np.int64) if episode_ids is None else np.asarray(episode_ids, dtype=np.int64)
        if len(ids) != n:
            raise DataError(f"{len(ids)} episode ids for {n} records")
        if len(np.unique(ids)) != n:
            raise DataError("episode ids must be unique")
        ids.setflags(write=False)

        self.schema = schema
        self._columns = data
        self.episode_ids = ids
        self.provenance = dict(provenance or {})

    def __len__(self) -> int:
        return len(self.episode_ids)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._columns[name]
        except KeyError:
            raise DataError(f"unknown column {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._columns

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.schema == other.schema
            and np.array_equal(self.episode_ids, other.episode_ids)
            and all(np.array_equal(self[c.name], other[c.name]) for c in self.schema)
            and self.provenance == other.provenance
        )

    def __repr__(self) -> str:
        return f"Dataset(n={len(self)}, columns={self.names})"

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.schema]

    def column(self, name: str) -> Column:
        for c in self.schema:
            if c.name == name:
                return c
        raise DataError(f"unknown column {name!r}")

    def names_with_role(self, role: str) -> list[str]:
        return [c.name for c in self.schema if c.role == role]

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        """Stack the named columns into an ``(n, len(names))`` float array."""
        return np.column_stack([self[n].astype(np.float64) for n in names]) if names else np.empty((len(self), 0))

    def records(self) -> Iterator[dict]:
        for i in range(len(self)):
            row = {"episode_id": int(self.episode_ids[i])}
            for c in self.schema:
                v = self._columns[c.name][i]
                row[c.name] = int(v) if c.is_integer else float(v)
            yield row

    def take(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.schema,
            {n: a[idx] for n, a in self._columns.items()},
            self.episode_ids[idx],
            self.provenance,
        )

    def with_columns(self, extra: Sequence[Column], values: Mapping[str, Iterable]) -> "Dataset":
        cols = dict(self._columns)
        cols.update(values)
        return Dataset(self.schema + tuple(extra), cols, self.episode_ids, self.provenance)


def format_real(x: float) -> str:
    """Shortest decimal string that parses back to exactly ``x``."""
    return repr(float(x))


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name[:-4] + ".meta.json") if path.suffix == ".csv" else path.with_name(path.name + ".meta.json")


def save(dataset: Dataset, path) -> tuple[Path, Path]:
    """Write ``dataset`` to ``path`` (CSV) and its sidecar ``*.meta.json``."""
    path = Path(path)
    buf = io.StringIO(newline="")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["episode_id"] + dataset.names)
    ints = [c.is_integer for c in dataset.schema]
    cols = [dataset[c.name] for c in dataset.schema]
    for i in range(len(dataset)):
        row = [str(int(dataset.episode_ids[i]))]
        for is_int, arr in zip(ints, cols):
            row.append(str(int(arr[i])) if is_int else format_real(arr[i]))
        writer.writerow(row)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8", newline="")

    meta = {
        "format": META_FORMAT,
        "n_records": len(dataset),
        "schema": [c.to_dict() for c in dataset.schema],
        "provenance": dataset.provenance,
    }
    meta_path = _meta_path(path)
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path, meta_path


def load(path) -> Dataset:
    path = Path(path)
    meta_path = _meta_path(path)
    if not meta_path.exists():
        raise ParseError("missing metadata sidecar", path=meta_path)
    if not path.exists():
        raise ParseError("missing dataset file", path=path)
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}", path=meta_path) from exc
    if meta.get("format") != META_FORMAT:
        raise ParseError(f"unsupported format {meta.get('format')!r}", path=meta_path)
    try:
        schema = [Column.from_dict(d) for d in meta["schema"]]
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed schema entry: {exc}", path=meta_path) from exc

    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty file, no header", path=path, row=1)
    header = rows[0]
    expected = ["episode_id"] + [c.name for c in schema]
    for name in expected:
        if name not in header:
            raise ParseError(f"header is missing column {name!r}", path=path, row=1, column=name)
    for name in header:
        if name not in expected:
            raise ParseError(f"header has undeclared column {name!r}", path=path, row=1, column=name)
    if header != expected:
        raise ParseError(f"header order {header} differs from schema {expected}", path=path, row=1)

    kinds = [True] + [c.is_integer for c in schema]
    parsed: list[list] = [[] for _ in expected]
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(expected):
            raise ParseError(f"expected {len(expected)} fields, found {len(row)}", path=path, row=lineno)
        for j, (cell, is_int) in enumerate(zip(row, kinds)):
            try:
                parsed[j].append(int(cell) if is_int else float(cell))
            except ValueError:
                raise ParseError(f"cannot parse {cell!r}", path=path, row=lineno, column=expected[j]) from None
    n = len(rows) - 1
    if meta.get("n_records") is not None and meta["n_records"] != n:
        raise ParseError(f"sidecar declares {meta['n_records']} records, file has {n}", path=path)
    columns = {name: np.asarray(vals, dtype=np.int64 if is_int else np.float64) for name, vals, is_int in zip(expected, parsed, kinds)}
    ids = columns.pop("episode_id")
    try:
        return Dataset(schema, columns, ids, meta.get("provenance"))
    except DomainError as exc:
        raise ParseError(str(exc), path=path) from exc


def split(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded random partition into (train, test)."""
    if not 0.0 < train_fraction < 1.0:
        raise DataError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n = len(dataset)
    n_train = int(round(n * train_fraction))
    if n_train == 0 or n_train == n:
        raise DataError(f"cannot split {n} records with train_fraction={train_fraction}")
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.take(np.sort(perm[:n_train])), dataset.take(np.sort(perm[n_train:]))


@dataclass(frozen=True)
class StratumSpec:
    """Stratification of one column, by explicit ``levels`` or ascending bin ``edges``.

    Real bins are half-open ``[lo, hi)`` except the last, which is closed.
    """

    variable: str
    levels: tuple | None = None
    edges: tuple | None = None

    def __post_init__(self):
        if (self.levels is None) == (self.edges is None):
            raise DataError(f"stratum spec for {self.variable!r} needs exactly one of levels or edges")
        if self.levels is not None:
            object.__setattr__(self, "levels", tuple(self.levels))
            if not self.levels:
                raise DataError(f"stratum spec for {self.variable!r} has no levels")
        if self.edges is not None:
            edges = tuple(float(e) for e in self.edges)
            if len(edges) < 2:
                raise DataError(f"stratum spec for {self.variable!r} needs at least two edges")
            if any(b <= a for a, b in zip(edges, edges[1:])):
                raise DataError(f"stratum edges for {self.variable!r} must be strictly ascending: {edges}")
            object.__setattr__(self, "edges", edges)

    @property
    def labels(self) -> list[str]:
        if self.levels is not None:
            return [f"{self.variable}={_fmt(v)}" for v in self.levels]
        e = self.edges
        out = []
        for k in range(len(e) - 1):
            close = "]" if k == len(e) - 2 else ")"
            out.append(f"{self.variable}∈[{_fmt(e[k])},{_fmt(e[k + 1])}{close}")
        return out

    def assign(self, values: np.ndarray) -> np.ndarray:
        """Stratum index of each value; raises if a value falls outside every stratum."""
        values = np.asarray(values)
        if self.levels is not None:
            lookup = {v: k for k, v in enumerate(self.levels)}
            out = np.empty(len(values), dtype=np.int64)
            for i, v in enumerate(values.tolist()):
                if v not in lookup:
                    raise DataError(f"{self.variable}={v!r} matches no declared level")
                out[i] = lookup[v]
            return out
        e = np.asarray(self.edges)
        outside = (values < e[0]) | (values > e[-1]) | ~np.isfinite(values)
        if outside.any():
            v = values[np.flatnonzero(outside)[0]]
            raise DataError(f"{self.variable}={v!r} lies outside bins [{_fmt(e[0])}, {_fmt(e[-1])}]")
        return np.clip(np.searchsorted(e, values, side="right") - 1, 0, len(e) - 2)

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"variable": self.variable}
        if self.levels is not None:
            d["levels"] = list(self.levels)
        else:
            d["edges"] = list(self.edges)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "StratumSpec":
        return cls(d["variable"], levels=d.get("levels"), edges=d.get("edges"))


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)) and math.isfinite(v) and float(v).is_integer():
        return str(int(v))
    return str(v)


def levels_spec(dataset: Dataset, variable: str) -> StratumSpec:
    """Stratum spec with one stratum per declared (or observed) level of a column."""
    col = dataset.column(variable)
    levels = col.levels if col.levels is not None else tuple(np.unique(dataset[variable]).tolist())
    return StratumSpec(variable, levels=levels)


def stratify(dataset: Dataset, spec: StratumSpec) -> dict[str, np.ndarray]:
    """Map each stratum label to the sorted indices of its records (empty strata kept)."""
    values = dataset[spec.variable]
    ids = spec.assign(values)
    return {label: np.flatnonzero(ids == k) for k, label in enumerate(spec.labels)}
