"""Observed-data model: a non-probability sample A and a probability sample B.

Each unit carries its covariates, the membership indicators ``delta`` (in A)
and ``in_b`` (in B), the outcome when it belongs to A and the design weight
when it belongs to B. Units may belong to both samples.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError

__all__ = [
    "UnitRecord",
    "CombinedSample",
    "PositivityConfig",
    "Schema",
    "validate",
    "load_csv",
    "load_csv_pair",
    "write_csv",
    "design_matrix",
]


@dataclass(frozen=True)
class UnitRecord:
    x: tuple[float, ...]
    delta: int
    in_b: int
    y: float | None = None
    d: float | None = None
    pi: float | None = None


@dataclass(frozen=True)
class PositivityConfig:
    epsilon: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError("epsilon must lie in (0, 0.5)")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


class CombinedSample:
    """Column-oriented, immutable storage for the union of A and B.

    Missing outcomes and weights are stored as NaN. Construction does not
    validate; call :func:`validate` (or use :func:`load_csv`, which does).
    """

    def __init__(
        self,
        x,
        delta,
        in_b,
        y=None,
        d=None,
        pi=None,
        names: Sequence[str] | None = None,
    ):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        self._x = _frozen(x)
        self._delta = _frozen(np.asarray(delta, dtype=float).reshape(n))
        self._in_b = _frozen(np.asarray(in_b, dtype=float).reshape(n))
        nan = np.full(n, np.nan)
        self._y = _frozen(nan if y is None else np.asarray(y, dtype=float).reshape(n))
        self._d = _frozen(nan if d is None else np.asarray(d, dtype=float).reshape(n))
        self._pi = _frozen(nan if pi is None else np.asarray(pi, dtype=float).reshape(n))
        if names is None:
            names = [f"x{j + 1}" for j in range(x.shape[1])]
        self.names = tuple(names)

    @classmethod
    def from_records(cls, records: Iterable[UnitRecord], names=None) -> CombinedSample:
        records = list(records)
        if not records:
            raise ValueError("no records")
        none = lambda v: np.nan if v is None else v  # noqa: E731
        return cls(
            x=[r.x for r in records],
            delta=[r.delta for r in records],
            in_b=[r.in_b for r in records],
            y=[none(r.y) for r in records],
            d=[none(r.d) for r in records],
            pi=[none(r.pi) for r in records],
            names=names,
        )

    @property
    def records(self) -> list[UnitRecord]:
        out = []
        for i in range(self.n):
            opt = lambda v: None if math.isnan(v) else float(v)  # noqa: E731
            out.append(
                UnitRecord(
                    x=tuple(float(v) for v in self._x[i]),
                    delta=int(self._delta[i]),
                    in_b=int(self._in_b[i]),
                    y=opt(self._y[i]),
                    d=opt(self._d[i]),
                    pi=opt(self._pi[i]),
                )
            )
        return out

    # raw columns
    x = property(lambda self: self._x)
    delta = property(lambda self: self._delta)
    in_b = property(lambda self: self._in_b)
    y = property(lambda self: self._y)
    d = property(lambda self: self._d)
    pi = property(lambda self: self._pi)

    @property
    def n(self) -> int:
        return self._x.shape[0]

    @property
    def p(self) -> int:
        return self._x.shape[1]

    @property
    def mask_a(self) -> np.ndarray:
        return self._delta == 1

    @property
    def mask_b(self) -> np.ndarray:
        return self._in_b == 1

    @property
    def n_a(self) -> int:
        return int(self.mask_a.sum())

    @property
    def n_b(self) -> int:
        return int(self.mask_b.sum())

    # convenient per-sample views
    @property
    def x_a(self) -> np.ndarray:
        return self._x[self.mask_a]

    @property
    def x_b(self) -> np.ndarray:
        return self._x[self.mask_b]

    @property
    def y_a(self) -> np.ndarray:
        return self._y[self.mask_a]

    @property
    def d_b(self) -> np.ndarray:
        return self._d[self.mask_b]

    @property
    def delta_b(self) -> np.ndarray:
        return self._delta[self.mask_b]

    @property
    def pi_b(self) -> np.ndarray:
        """Inclusion probabilities for B, falling back to 1/d where unknown."""
        pi = self._pi[self.mask_b]
        return np.where(np.isnan(pi), 1.0 / self.d_b, pi)

    def with_outcome(self, y) -> CombinedSample:
        """Copy with the outcome column replaced (NaN kept off A)."""
        y = np.asarray(y, dtype=float)
        y = np.where(self.mask_a, y, np.nan)
        return CombinedSample(self._x, self._delta, self._in_b, y, self._d, self._pi, self.names)

    def with_covariates(self, x, names=None) -> CombinedSample:
        return CombinedSample(
            x, self._delta, self._in_b, self._y, self._d, self._pi, names or None
        )

    def __repr__(self):
        return f"CombinedSample(n_a={self.n_a}, n_b={self.n_b}, p={self.p})"


def validate(sample: CombinedSample) -> list[str]:
    """Return a list of invariant violations; empty when the sample is valid."""
    problems: list[str] = []
    x, delta, in_b = sample.x, sample.delta, sample.in_b
    y, d, pi = sample.y, sample.d, sample.pi

    if len(set(sample.names)) != len(sample.names):
        problems.append("duplicate covariate labels")
    if len(sample.names) != sample.p:
        problems.append(f"{len(sample.names)} labels for {sample.p} covariates")
    if not np.all(np.isfinite(x)):
        rows = np.flatnonzero(~np.all(np.isfinite(x), axis=1))
        problems.append(f"missing or non-finite covariate in rows {rows.tolist()}")
    for name, col in (("delta", delta), ("in_b", in_b)):
        bad = np.flatnonzero(~np.isin(col, (0.0, 1.0)))
        if bad.size:
            problems.append(f"{name} not binary in rows {bad.tolist()}")

    a = delta == 1
    b = in_b == 1
    orphan = np.flatnonzero(~a & ~b)
    if orphan.size:
        problems.append(f"record in neither sample: rows {orphan.tolist()}")
    miss_y = np.flatnonzero(a & ~np.isfinite(y))
    if miss_y.size:
        problems.append(f"missing outcome for A units in rows {miss_y.tolist()}")
    miss_d = np.flatnonzero(b & ~np.isfinite(d))
    if miss_d.size:
        problems.append(f"missing design weight for B units in rows {miss_d.tolist()}")
    small_d = np.flatnonzero(b & np.isfinite(d) & (d < 1))
    if small_d.size:
        problems.append(f"design weight below 1 in rows {small_d.tolist()}")
    has_pi = np.isfinite(pi)
    bad_pi = np.flatnonzero(has_pi & ((pi <= 0) | (pi > 1)))
    if bad_pi.size:
        problems.append(f"inclusion probability outside (0, 1] in rows {bad_pi.tolist()}")
    with np.errstate(invalid="ignore"):
        mismatch = np.flatnonzero(has_pi & np.isfinite(d) & (np.abs(pi * d - 1) >= 1e-12))
    if mismatch.size:
        problems.append(f"pi*d != 1 in rows {mismatch.tolist()}")

    if not a.any():
        problems.append("sample A is empty")
    if not b.any():
        problems.append("sample B is empty")
    return problems


@dataclass(frozen=True)
class Schema:
    """Maps CSV columns onto the observed-data fields.

    ``delta`` may be omitted for a B-only file (membership in A then defaults
    to 0) and ``in_b`` for an A-only file.
    """

    covariates: tuple[str, ...]
    delta: str | None = "delta"
    in_b: str | None = "in_b"
    y: str | None = "y"
    d: str | None = "d"
    pi: str | None = None

    _KEYS = ("covariates", "delta", "in_b", "y", "d", "pi")

    @classmethod
    def from_mapping(cls, mapping) -> Schema:
        mapping = dict(mapping)
        unknown = set(mapping) - set(cls._KEYS) - {"weight", "outcome"}
        if unknown:
            raise ValueError(f"unknown schema keys: {sorted(unknown)}")
        if "weight" in mapping:
            mapping.setdefault("d", mapping.pop("weight"))
        if "outcome" in mapping:
            mapping.setdefault("y", mapping.pop("outcome"))
        covs = mapping.get("covariates")
        if not covs:
            raise ValueError("schema needs covariates")
        if isinstance(covs, str):
            covs = [c.strip() for c in covs.split(",") if c.strip()]
        kwargs = {k: (mapping[k] or None) for k in ("delta", "in_b", "y", "d", "pi") if k in mapping}
        return cls(covariates=tuple(covs), **kwargs)

    @classmethod
    def from_file(cls, path) -> Schema:
        """Read a ``key=value`` file; blank lines and ``#`` comments ignored."""
        mapping = {}
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"bad schema line: {line!r}")
            mapping[key.strip()] = value.strip()
        return cls.from_mapping(mapping)


def _parse_cell(text: str, row: int, column: str, optional: bool) -> float:
    text = text.strip()
    if text == "" or text.upper() == "NA":
        if optional:
            return math.nan
        raise ParseError(f"missing value in column {column!r}", row)
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"non-numeric value {text!r} in column {column!r}", row) from None


def _read_columns(path, schema: Schema, defaults: dict[str, float]):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        wanted = {
            "delta": schema.delta,
            "in_b": schema.in_b,
            "y": schema.y,
            "d": schema.d,
            "pi": schema.pi,
        }
        for col in schema.covariates:
            if col not in header:
                raise ParseError(f"missing required column {col!r}")
        for key, col in wanted.items():
            if col is not None and col not in header:
                if key in defaults or key in ("y", "d", "pi"):
                    wanted[key] = None
                else:
                    raise ParseError(f"missing required column {col!r}")
        rows = {k: [] for k in ("x", "delta", "in_b", "y", "d", "pi")}
        # header is row 1, so data starts at row 2
        for idx, row in enumerate(reader, start=2):
            if None in row:
                raise ParseError("too many fields", idx)
            rows["x"].append(
                [_parse_cell(row[c] or "", idx, c, optional=False) for c in schema.covariates]
            )
            for key in ("delta", "in_b", "y", "d", "pi"):
                col = wanted[key]
                if col is None:
                    rows[key].append(defaults.get(key, math.nan))
                else:
                    rows[key].append(
                        _parse_cell(row[col] or "", idx, col, optional=key in ("y", "d", "pi"))
                    )
    return rows


def _to_sample(rows, names) -> CombinedSample:
    if not rows["x"]:
        raise ParseError("no data rows")
    return CombinedSample(
        x=np.array(rows["x"], dtype=float),
        delta=rows["delta"],
        in_b=rows["in_b"],
        y=rows["y"],
        d=rows["d"],
        pi=rows["pi"],
        names=names,
    )


def load_csv(path, schema: Schema) -> CombinedSample:
    """Load a combined file holding both samples.

    Raises :class:`ParseError` on malformed rows and :class:`ValidationError`
    when the parsed sample breaks an invariant.
    """
    defaults = {}
    if schema.delta is None:
        defaults["delta"] = 0.0
    if schema.in_b is None:
        defaults["in_b"] = 0.0
    sample = _to_sample(_read_columns(path, schema, defaults), schema.covariates)
    problems = validate(sample)
    if problems:
        raise ValidationError(problems)
    return sample


def load_csv_pair(path_a, path_b, schema: Schema) -> CombinedSample:
    """Load A and B from separate files and stack them.

    Units in the A file get ``delta=1, in_b=0``. Units in the B file get
    ``in_b=1`` and the file's ``delta`` column when present, else 0.
    """
    rows_a = _read_columns(path_a, schema, {"delta": 1.0, "in_b": 0.0})
    rows_a["delta"] = [1.0] * len(rows_a["x"])
    rows_a["in_b"] = [0.0] * len(rows_a["x"])
    rows_a["d"] = [math.nan] * len(rows_a["x"])
    rows_b = _read_columns(path_b, schema, {"delta": 0.0, "in_b": 1.0})
    rows_b["in_b"] = [1.0] * len(rows_b["x"])
    rows_b["y"] = [
        y if delta == 1 else math.nan for y, delta in zip(rows_b["y"], rows_b["delta"])
    ]
    merged = {k: rows_a[k] + rows_b[k] for k in rows_a}
    sample = _to_sample(merged, schema.covariates)
    problems = validate(sample)
    if problems:
        raise ValidationError(problems)
    return sample


def write_csv(sample: CombinedSample, path, schema: Schema | None = None) -> Schema:
    """Write ``sample`` as a combined CSV; returns the schema describing it."""
    if schema is None:
        schema = Schema(covariates=sample.names, pi="pi")
    cols = list(schema.covariates) + [
        c for c in (schema.delta, schema.in_b, schema.y, schema.d, schema.pi) if c
    ]
    fmt = lambda v: "" if math.isnan(v) else repr(float(v))  # noqa: E731
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for i in range(sample.n):
            row = [fmt(v) for v in sample.x[i]]
            for key in ("delta", "in_b", "y", "d", "pi"):
                if getattr(schema, key):
                    v = getattr(sample, key)[i]
                    row.append(str(int(v)) if key in ("delta", "in_b") else fmt(v))
            w.writerow(row)
    return schema


def design_matrix(
    sample: CombinedSample,
    subset: Sequence[int] | None = None,
    with_intercept: bool = True,
    which: str = "both",
) -> np.ndarray:
    """Design matrix over A, B or every record, in stored record order.

    ``subset=None`` means all covariates. For ``which="both"`` a unit in
    A and B contributes one row.
    """
    subset = list(range(sample.p)) if subset is None else [int(j) for j in subset]
    if not subset and not with_intercept:
        raise ValueError("empty covariate subset without intercept")
    if any(j < 0 or j >= sample.p for j in subset):
        raise IndexError(f"covariate index out of range for p={sample.p}")
    rows = {"a": sample.mask_a, "b": sample.mask_b, "both": slice(None)}[which]
    x = sample.x[rows][:, subset]
    if with_intercept:
        x = np.column_stack([np.ones(x.shape[0]), x])
    return x
