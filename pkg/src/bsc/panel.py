"""Panel data container and CSV ingestion.

Outcomes are held as a ``T x J`` matrix (years by societies). A single society
is treated from ``treatment_start`` onwards; the treatment mask ``D`` is derived
from those two indices and never stored independently.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "PanelData",
    "PanelError",
    "load_csv",
    "write_csv",
    "load_deflator",
    "deflate",
    "relabel",
    "drop_society",
    "from_matrix",
]


class PanelError(ValueError):
    """Raised for malformed or inconsistent panel input."""


@dataclass(frozen=True)
class PanelData:
    """Complete balanced panel with a single treated society.

    Attributes
    ----------
    years : tuple of int
        Strictly increasing year labels, length ``T``.
    societies : tuple of str
        Unique society names, length ``J``.
    outcomes : ndarray, shape (T, J)
        Observed outcome matrix. Read-only.
    treated_society : int
        Column index of the treated society.
    treatment_start : int
        Row index ``T0`` of the first treated year.
    """

    years: tuple[int, ...]
    societies: tuple[str, ...]
    outcomes: np.ndarray = field(repr=False)
    treated_society: int
    treatment_start: int

    def __post_init__(self):
        years = tuple(int(y) for y in self.years)
        societies = tuple(str(s) for s in self.societies)
        y = np.array(self.outcomes, dtype=np.float64, copy=True)
        object.__setattr__(self, "years", years)
        object.__setattr__(self, "societies", societies)
        T, J = len(years), len(societies)
        if y.shape != (T, J):
            raise PanelError(f"outcomes shape {y.shape} does not match ({T}, {J})")
        if not np.all(np.isfinite(y)):
            raise PanelError("outcomes contain missing or non-finite cells")
        if any(b <= a for a, b in zip(years, years[1:])):
            raise PanelError("years must be strictly increasing")
        if len(set(societies)) != J:
            raise PanelError("society names must be unique")
        if not 0 <= self.treated_society < J:
            raise PanelError(f"treated society index {self.treated_society} out of range")
        if not 0 < self.treatment_start < T:
            raise PanelError("need at least one pre-treatment and one treated year")
        y.setflags(write=False)
        object.__setattr__(self, "outcomes", y)

    @property
    def T(self) -> int:
        return len(self.years)

    @property
    def J(self) -> int:
        return len(self.societies)

    @property
    def n_treated(self) -> int:
        """Number of treated cells, ``T - T0``."""
        return self.T - self.treatment_start

    @property
    def mask(self) -> np.ndarray:
        d = np.zeros((self.T, self.J), dtype=np.int8)
        d[self.treatment_start:, self.treated_society] = 1
        return d

    @property
    def treated_name(self) -> str:
        return self.societies[self.treated_society]

    @property
    def post_years(self) -> tuple[int, ...]:
        return self.years[self.treatment_start:]

    @property
    def untreated_columns(self) -> np.ndarray:
        return np.array([j for j in range(self.J) if j != self.treated_society], dtype=int)

    def __eq__(self, other):
        if not isinstance(other, PanelData):
            return NotImplemented
        return (
            self.years == other.years
            and self.societies == other.societies
            and self.treated_society == other.treated_society
            and self.treatment_start == other.treatment_start
            and np.array_equal(self.outcomes, other.outcomes)
        )

    __hash__ = None


def _build(years, societies, values: Mapping[tuple[str, int], float], treated: str,
           treatment_start_year: int) -> PanelData:
    if treated not in societies:
        raise PanelError(f"unknown treated society {treated!r}")
    if treatment_start_year not in years:
        raise PanelError(f"treatment start year {treatment_start_year} outside {years[0]}..{years[-1]}")
    t0 = years.index(treatment_start_year)
    if t0 == 0:
        raise PanelError("treatment cannot start in the first year")
    y = np.empty((len(years), len(societies)))
    for j, s in enumerate(societies):
        for t, yr in enumerate(years):
            try:
                y[t, j] = values[s, yr]
            except KeyError:
                raise PanelError(f"ragged panel: {s!r} has no value for {yr}") from None
    return PanelData(tuple(years), tuple(societies), y, societies.index(treated), t0)


def load_csv(path, treated: str, treatment_start_year: int) -> PanelData:
    """Read a long-format ``society,year,outcome`` CSV into a :class:`PanelData`.

    Rows are sorted by year; society columns keep first-appearance order.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"panel file not found: {path}")
    societies: list[str] = []
    seen: set[str] = set()
    years: set[int] = set()
    values: dict[tuple[str, int], float] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise PanelError("ragged panel: file is empty")
        missing = {"society", "year", "outcome"} - set(reader.fieldnames)
        if missing:
            raise PanelError(f"missing columns: {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            name = row["society"]
            try:
                yr = int(row["year"])
                val = float(row["outcome"])
            except (TypeError, ValueError):
                raise PanelError(f"line {lineno}: unparsable year/outcome") from None
            if not math.isfinite(val):
                raise PanelError(f"line {lineno}: missing outcome for {name!r} in {yr}")
            if (name, yr) in values:
                raise PanelError(f"line {lineno}: duplicate entry for {name!r} in {yr}")
            if name not in seen:
                seen.add(name)
                societies.append(name)
            years.add(yr)
            values[name, yr] = val
    if not values:
        raise PanelError("ragged panel: no data rows")
    return _build(sorted(years), societies, values, treated, treatment_start_year)


def write_csv(panel: PanelData, path) -> None:
    """Write ``panel`` in long format; floats use shortest round-trip repr."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["society", "year", "outcome"])
        for j, s in enumerate(panel.societies):
            for t, yr in enumerate(panel.years):
                w.writerow([s, yr, repr(float(panel.outcomes[t, j]))])


def load_deflator(path) -> dict[int, float]:
    """Read a ``year,deflator`` CSV."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"deflator file not found: {path}")
    out: dict[int, float] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or {"year", "deflator"} - set(reader.fieldnames):
            raise PanelError("deflator CSV needs columns year,deflator")
        for row in reader:
            out[int(row["year"])] = float(row["deflator"])
    return out


def deflate(panel: PanelData, deflator: Mapping[int, float], base_year: int) -> PanelData:
    """Express outcomes in ``base_year`` prices.

    Each cell is multiplied by ``deflator[base_year] / deflator[year]``.
    """
    needed = set(panel.years) | {base_year}
    absent = sorted(needed - set(deflator))
    if absent:
        raise PanelError(f"deflator missing years: {absent}")
    if any(not deflator[y] > 0 for y in needed):
        raise PanelError("deflator values must be positive")
    factor = np.array([deflator[base_year] / deflator[y] for y in panel.years])
    return PanelData(panel.years, panel.societies, panel.outcomes * factor[:, None],
                     panel.treated_society, panel.treatment_start)


def relabel(panel: PanelData, new_treated: int) -> PanelData:
    """Same outcomes, with ``new_treated`` as the treated society from the same ``T0``."""
    if panel.J < 2:
        raise PanelError("relabeling needs at least one comparison society")
    if not 0 <= new_treated < panel.J:
        raise PanelError(f"society index {new_treated} out of range [0, {panel.J})")
    return PanelData(panel.years, panel.societies, panel.outcomes, int(new_treated),
                     panel.treatment_start)


def drop_society(panel: PanelData, index: int, treated: int | None = None) -> PanelData:
    """Remove column ``index``; ``treated`` names the new treated column in the
    original indexing (required when the current treated society is dropped)."""
    if treated is None:
        if index == panel.treated_society:
            raise PanelError("cannot drop the treated society without naming a new one")
        treated = panel.treated_society
    keep = [j for j in range(panel.J) if j != index]
    if treated not in keep:
        raise PanelError("new treated society is the dropped one")
    return PanelData(panel.years, tuple(panel.societies[j] for j in keep),
                     panel.outcomes[:, keep], keep.index(treated), panel.treatment_start)


def from_matrix(outcomes, treated_society: int, treatment_start: int,
                years: Sequence[int] | None = None,
                societies: Sequence[str] | None = None) -> PanelData:
    """Convenience constructor with default integer years and ``s0..`` names."""
    outcomes = np.asarray(outcomes, dtype=float)
    T, J = outcomes.shape
    years = tuple(range(T)) if years is None else tuple(years)
    societies = tuple(f"s{j}" for j in range(J)) if societies is None else tuple(societies)
    return PanelData(years, societies, outcomes, treated_society, treatment_start)
