"""Domain types, columnar dataset containers and CSV ingestion.

Datasets are stored column-wise as read-only numpy arrays; the per-unit record
types (``ObservedUnit`` etc.) are produced on iteration or indexing.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DataError

__all__ = [
    "Stratum",
    "STRATA",
    "Event",
    "ObservedUnit",
    "CompleteUnit",
    "SurvivalUnit",
    "Dataset",
    "CompleteDataset",
    "SurvivalDataset",
    "stratum_index",
    "load_observed_csv",
    "load_complete_csv",
    "load_survival_csv",
]


class Stratum(str, enum.Enum):
    """Principal stratum, the joint pattern of potential auxiliaries (s0, s1)."""

    I = "I"  # noqa: E741  (0, 0) immune
    TP = "TP"  # (1, 0) treatment protective
    TH = "TH"  # (0, 1) treatment harmful
    D = "D"  # (1, 1) doomed

    @property
    def pair(self) -> tuple[int, int]:
        return _PAIRS[self]

    @property
    def index(self) -> int:
        s0, s1 = self.pair
        return s0 + 2 * s1

    @classmethod
    def from_pair(cls, s0: int, s1: int) -> "Stratum":
        if s0 not in (0, 1) or s1 not in (0, 1):
            raise DataError(f"potential auxiliaries must be 0/1, got ({s0}, {s1})")
        return STRATA[s0 + 2 * s1]

    def __str__(self) -> str:
        return self.value


_PAIRS = {Stratum.I: (0, 0), Stratum.TP: (1, 0), Stratum.TH: (0, 1), Stratum.D: (1, 1)}

# Ordered so that STRATA[s0 + 2 * s1] is the stratum of (s0, s1).
STRATA: tuple[Stratum, ...] = (Stratum.I, Stratum.TP, Stratum.TH, Stratum.D)


def stratum_index(s0, s1):
    """Vectorised stratum code (position in ``STRATA``) of potential auxiliaries."""
    return np.asarray(s0, dtype=np.int64) + 2 * np.asarray(s1, dtype=np.int64)


class Event(enum.IntEnum):
    """Event type of a survival record, using the CSV integer codes."""

    ADMIN = 0
    MAIN = 1
    COMPETING = 2


@dataclass(frozen=True)
class ObservedUnit:
    x: tuple[float, ...]
    a: int
    s: int
    y: float

    def __post_init__(self):
        if self.a not in (0, 1):
            raise DataError(f"invalid treatment {self.a!r}")
        if self.s not in (0, 1):
            raise DataError(f"invalid auxiliary {self.s!r}")
        if not math.isfinite(self.y):
            raise DataError("non-finite outcome")


@dataclass(frozen=True)
class CompleteUnit:
    x: tuple[float, ...]
    s0: int
    s1: int
    y0: float
    y1: float

    @property
    def stratum(self) -> Stratum:
        return Stratum.from_pair(self.s0, self.s1)


@dataclass(frozen=True)
class SurvivalUnit:
    x: tuple[float, ...]
    a: int
    s: int
    t: float
    event: Event
    c: float


def _frozen(arr, dtype):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _covariates(x, n):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(n, -1) if n else x.reshape(0, 0)
    return _frozen(x, float)


def _check_binary(values, what):
    bad = np.flatnonzero((values != 0) & (values != 1))
    if bad.size:
        raise DataError(f"invalid {what}", row=int(bad[0]) + 1)


def _check_finite(values, what):
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise DataError(f"non-finite {what}", row=int(bad[0]) + 1)


def _names(x_names, p):
    if x_names is None:
        return tuple(f"x{j + 1}" for j in range(p))
    x_names = tuple(x_names)
    if len(x_names) != p:
        raise DataError(f"{len(x_names)} covariate names for {p} covariate columns")
    return x_names


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observed trial data: covariates ``x`` (n, p), treatment ``a``, auxiliary ``s``, outcome ``y``."""

    x: np.ndarray
    a: np.ndarray
    s: np.ndarray
    y: np.ndarray
    x_names: tuple[str, ...] = ()

    def __post_init__(self):
        n = len(np.asarray(self.y))
        if n == 0:
            raise DataError("empty dataset")
        a = np.asarray(self.a, dtype=float)
        s = np.asarray(self.s, dtype=float)
        y = np.asarray(self.y, dtype=float)
        x = _covariates(self.x, n)
        if not (len(a) == len(s) == x.shape[0] == n):
            raise DataError("column lengths differ")
        _check_binary(a, "treatment")
        _check_binary(s, "auxiliary")
        _check_finite(y, "outcome")
        _check_finite(x, "covariate")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "a", _frozen(a, np.int64))
        object.__setattr__(self, "s", _frozen(s, np.int64))
        object.__setattr__(self, "y", _frozen(y, float))
        object.__setattr__(self, "x_names", _names(self.x_names or None, x.shape[1]))

    @classmethod
    def from_units(cls, units: Sequence[ObservedUnit], x_names=None) -> "Dataset":
        units = list(units)
        if not units:
            raise DataError("empty dataset")
        x = np.array([u.x for u in units], dtype=float).reshape(len(units), -1)
        return cls(
            x=x,
            a=[u.a for u in units],
            s=[u.s for u in units],
            y=[u.y for u in units],
            x_names=x_names or (),
        )

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def n_treated(self) -> int:
        return int(self.a.sum())

    def __len__(self):
        return self.n

    def __getitem__(self, i) -> ObservedUnit:
        return ObservedUnit(tuple(self.x[i]), int(self.a[i]), int(self.s[i]), float(self.y[i]))

    def __iter__(self) -> Iterator[ObservedUnit]:
        return (self[i] for i in range(self.n))

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.x_names == other.x_names and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("x", "a", "s", "y")
        )

    __hash__ = None

    def take(self, idx) -> "Dataset":
        """Subset (or resample, with repeated indices) units."""
        idx = np.asarray(idx)
        return Dataset(self.x[idx], self.a[idx], self.s[idx], self.y[idx], self.x_names)

    def to_csv(self, path) -> None:
        header = [*self.x_names, "a", "s", "y"]
        rows = (
            [*map(_fmt, self.x[i]), int(self.a[i]), int(self.s[i]), _fmt(self.y[i])]
            for i in range(self.n)
        )
        _write(path, header, rows)


@dataclass(frozen=True, eq=False)
class CompleteDataset:
    """Full potential-outcome records (x, s0, s1, y0, y1); input to the oracle."""

    x: np.ndarray
    s0: np.ndarray
    s1: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    x_names: tuple[str, ...] = ()

    def __post_init__(self):
        n = len(np.asarray(self.y0))
        if n == 0:
            raise DataError("empty dataset")
        s0 = np.asarray(self.s0, dtype=float)
        s1 = np.asarray(self.s1, dtype=float)
        y0 = np.asarray(self.y0, dtype=float)
        y1 = np.asarray(self.y1, dtype=float)
        x = _covariates(self.x, n)
        if not (len(s0) == len(s1) == len(y1) == x.shape[0] == n):
            raise DataError("column lengths differ")
        _check_binary(s0, "potential auxiliary s0")
        _check_binary(s1, "potential auxiliary s1")
        _check_finite(y0, "potential outcome y0")
        _check_finite(y1, "potential outcome y1")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "s0", _frozen(s0, np.int64))
        object.__setattr__(self, "s1", _frozen(s1, np.int64))
        object.__setattr__(self, "y0", _frozen(y0, float))
        object.__setattr__(self, "y1", _frozen(y1, float))
        object.__setattr__(self, "x_names", _names(self.x_names or None, x.shape[1]))

    @property
    def n(self) -> int:
        return len(self.y0)

    def __len__(self):
        return self.n

    @property
    def stratum_codes(self) -> np.ndarray:
        """Stratum of each unit as an index into ``STRATA``."""
        return stratum_index(self.s0, self.s1)

    @property
    def strata(self) -> list[Stratum]:
        return [STRATA[k] for k in self.stratum_codes]

    def __getitem__(self, i) -> CompleteUnit:
        return CompleteUnit(
            tuple(self.x[i]), int(self.s0[i]), int(self.s1[i]), float(self.y0[i]), float(self.y1[i])
        )

    def __iter__(self) -> Iterator[CompleteUnit]:
        return (self[i] for i in range(self.n))

    def __eq__(self, other):
        if not isinstance(other, CompleteDataset):
            return NotImplemented
        return self.x_names == other.x_names and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("x", "s0", "s1", "y0", "y1")
        )

    __hash__ = None

    def take(self, idx) -> "CompleteDataset":
        idx = np.asarray(idx)
        return CompleteDataset(
            self.x[idx], self.s0[idx], self.s1[idx], self.y0[idx], self.y1[idx], self.x_names
        )

    def to_csv(self, path) -> None:
        header = [*self.x_names, "s0", "s1", "y0", "y1", "stratum"]
        codes = self.stratum_codes
        rows = (
            [
                *map(_fmt, self.x[i]),
                int(self.s0[i]),
                int(self.s1[i]),
                _fmt(self.y0[i]),
                _fmt(self.y1[i]),
                STRATA[codes[i]].value,
            ]
            for i in range(self.n)
        )
        _write(path, header, rows)


@dataclass(frozen=True, eq=False)
class SurvivalDataset:
    """Censored failure-time trial data.

    ``aux`` holds alternative auxiliary definitions (CSV columns named ``s_*``),
    e.g. "screened" next to the default "screen-diagnosed" column ``s``.
    """

    x: np.ndarray
    a: np.ndarray
    s: np.ndarray
    t: np.ndarray
    event: np.ndarray
    c: np.ndarray
    x_names: tuple[str, ...] = ()
    aux: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(np.asarray(self.t))
        if n == 0:
            raise DataError("empty dataset")
        a = np.asarray(self.a, dtype=float)
        s = np.asarray(self.s, dtype=float)
        t = np.asarray(self.t, dtype=float)
        c = np.asarray(self.c, dtype=float)
        ev = np.asarray(self.event, dtype=float)
        x = _covariates(self.x, n)
        if not (len(a) == len(s) == len(c) == len(ev) == x.shape[0] == n):
            raise DataError("column lengths differ")
        _check_binary(a, "treatment")
        _check_binary(s, "auxiliary")
        _check_finite(t, "time")
        _check_finite(c, "censor horizon")
        bad = np.flatnonzero(~np.isin(ev, (0, 1, 2)))
        if bad.size:
            raise DataError("unknown event code", row=int(bad[0]) + 1)
        bad = np.flatnonzero(t <= 0)
        if bad.size:
            raise DataError("non-positive time", row=int(bad[0]) + 1)
        bad = np.flatnonzero((ev != Event.ADMIN) & (t > c))
        if bad.size:
            raise DataError("event after horizon", row=int(bad[0]) + 1)
        bad = np.flatnonzero((ev == Event.ADMIN) & (t != c))
        if bad.size:
            raise DataError("administrative censoring before horizon", row=int(bad[0]) + 1)
        aux = {}
        for name, col in dict(self.aux).items():
            col = np.asarray(col, dtype=float)
            if len(col) != n:
                raise DataError(f"auxiliary column {name!r} has wrong length")
            _check_binary(col, f"auxiliary {name}")
            aux[name] = _frozen(col, np.int64)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "a", _frozen(a, np.int64))
        object.__setattr__(self, "s", _frozen(s, np.int64))
        object.__setattr__(self, "t", _frozen(t, float))
        object.__setattr__(self, "c", _frozen(c, float))
        object.__setattr__(self, "event", _frozen(ev, np.int64))
        object.__setattr__(self, "x_names", _names(self.x_names or None, x.shape[1]))
        object.__setattr__(self, "aux", aux)

    @property
    def n(self) -> int:
        return len(self.t)

    @property
    def n_treated(self) -> int:
        return int(self.a.sum())

    def __len__(self):
        return self.n

    def auxiliary(self, name: str = "s") -> np.ndarray:
        """Return the auxiliary column ``name`` (``"s"`` or one of the ``s_*`` columns)."""
        if name == "s":
            return self.s
        try:
            return self.aux[name]
        except KeyError:
            raise DataError(f"no auxiliary column {name!r}") from None

    def with_auxiliary(self, name: str) -> "SurvivalDataset":
        """Copy in which column ``name`` plays the role of ``s``."""
        return SurvivalDataset(
            self.x, self.a, self.auxiliary(name), self.t, self.event, self.c, self.x_names, self.aux
        )

    def __getitem__(self, i) -> SurvivalUnit:
        return SurvivalUnit(
            tuple(self.x[i]),
            int(self.a[i]),
            int(self.s[i]),
            float(self.t[i]),
            Event(int(self.event[i])),
            float(self.c[i]),
        )

    def __iter__(self) -> Iterator[SurvivalUnit]:
        return (self[i] for i in range(self.n))

    def __eq__(self, other):
        if not isinstance(other, SurvivalDataset):
            return NotImplemented
        same = self.x_names == other.x_names and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("x", "a", "s", "t", "event", "c")
        )
        return (
            same
            and self.aux.keys() == other.aux.keys()
            and all(np.array_equal(v, other.aux[k]) for k, v in self.aux.items())
        )

    __hash__ = None

    def take(self, idx) -> "SurvivalDataset":
        idx = np.asarray(idx)
        return SurvivalDataset(
            self.x[idx],
            self.a[idx],
            self.s[idx],
            self.t[idx],
            self.event[idx],
            self.c[idx],
            self.x_names,
            {k: v[idx] for k, v in self.aux.items()},
        )

    def to_csv(self, path) -> None:
        names = list(self.aux)
        header = [*self.x_names, "a", "s", *names, "time", "event", "censor_horizon"]
        rows = (
            [
                *map(_fmt, self.x[i]),
                int(self.a[i]),
                int(self.s[i]),
                *(int(self.aux[k][i]) for k in names),
                _fmt(self.t[i]),
                int(self.event[i]),
                _fmt(self.c[i]),
            ]
            for i in range(self.n)
        )
        _write(path, header, rows)


# --- CSV --------------------------------------------------------------------


def _fmt(v) -> str:
    # repr of a float round-trips exactly
    return repr(float(v))


def _write(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read(path) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError("empty dataset") from None
        rows = [r for r in reader if r and any(cell.strip() for cell in r)]
    if len(set(header)) != len(header):
        raise DataError("duplicate column names")
    for k, r in enumerate(rows, start=1):
        if len(r) != len(header):
            raise DataError(f"expected {len(header)} fields, found {len(r)}", row=k)
    if not rows:
        raise DataError("empty dataset")
    return header, rows


def _column(header, rows, name, what=None):
    try:
        j = header.index(name)
    except ValueError:
        raise DataError(f"missing column {name!r}") from None
    out = np.empty(len(rows))
    for k, r in enumerate(rows, start=1):
        try:
            out[k - 1] = float(r[j])
        except ValueError:
            raise DataError(f"invalid {what or name}", row=k) from None
    return out


def _covariate_block(header, rows, reserved):
    names = [h for h in header if h not in reserved]
    x = np.column_stack([_column(header, rows, h) for h in names]) if names else None
    if x is None:
        x = np.empty((len(rows), 0))
    return x, names


def load_observed_csv(path) -> Dataset:
    """Load observed data; columns ``a``, ``s``, ``y`` plus covariates."""
    header, rows = _read(path)
    reserved = {"a", "s", "y"}
    a = _column(header, rows, "a", "treatment")
    s = _column(header, rows, "s", "auxiliary")
    y = _column(header, rows, "y", "outcome")
    x, names = _covariate_block(header, rows, reserved)
    return Dataset(x, a, s, y, tuple(names))


def load_complete_csv(path) -> CompleteDataset:
    """Load potential-outcome data; columns ``s0``, ``s1``, ``y0``, ``y1``.

    An optional ``stratum`` column must agree with (s0, s1).
    """
    header, rows = _read(path)
    reserved = {"s0", "s1", "y0", "y1", "stratum"}
    s0 = _column(header, rows, "s0", "potential auxiliary s0")
    s1 = _column(header, rows, "s1", "potential auxiliary s1")
    y0 = _column(header, rows, "y0")
    y1 = _column(header, rows, "y1")
    x, names = _covariate_block(header, rows, reserved)
    d = CompleteDataset(x, s0, s1, y0, y1, tuple(names))
    if "stratum" in header:
        j = header.index("stratum")
        codes = d.stratum_codes
        for k, r in enumerate(rows, start=1):
            if r[j].strip() != STRATA[codes[k - 1]].value:
                raise DataError("stratum label disagrees with (s0, s1)", row=k)
    return d


def load_survival_csv(path) -> SurvivalDataset:
    """Load failure-time data.

    Columns ``a``, ``s``, ``time``, ``event`` (1 main, 2 competing, 0 admin) and
    ``censor_horizon``; columns named ``s_*`` are alternative auxiliaries; the
    rest are covariates.
    """
    header, rows = _read(path)
    reserved = {"a", "s", "time", "event", "censor_horizon"}
    aux_names = [h for h in header if h.startswith("s_")]
    a = _column(header, rows, "a", "treatment")
    s = _column(header, rows, "s", "auxiliary")
    t = _column(header, rows, "time")
    ev = _column(header, rows, "event", "event code")
    c = _column(header, rows, "censor_horizon")
    aux = {h: _column(header, rows, h) for h in aux_names}
    x, names = _covariate_block(header, rows, reserved | set(aux_names))
    return SurvivalDataset(x, a, s, t, ev, c, tuple(names), aux)
