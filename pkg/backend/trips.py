"""
Trip records: the tap-in/tap-out observations the sampler is fitted to.

Trip files are comma separated with a version line and a fixed header:

    #trip_schema=1
    origin_id,destination_id,interval,travel_time_s

``interval`` may be replaced by ``tap_in_time`` (HH:MM); the interval is then
derived from the configured day window and trips outside it are dropped.
"""

import hashlib
import io
import logging
import os
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, field_validator, model_validator

from errors import DataValidationError
from network import NetworkModel, PathTable

logger = logging.getLogger(__name__)

TRIP_SCHEMA_VERSION = 1
TRIP_COLUMNS = ["origin_id", "destination_id", "interval", "travel_time_s"]
CLOCK_COLUMN = "tap_in_time"


class TripObservation(BaseModel):
    origin: str
    destination: str
    t: int
    y: float

    @field_validator('t')
    @classmethod
    def validate_interval(cls, v):
        if v < 1:
            raise ValueError('interval index starts at 1')
        return v

    @field_validator('y')
    @classmethod
    def validate_travel_time(cls, v):
        if not (np.isfinite(v) and v > 0):
            raise ValueError('travel time must be positive')
        return v

    @model_validator(mode='after')
    def validate_od(self):
        if self.origin == self.destination:
            raise ValueError('origin equals destination')
        return self


@dataclass(frozen=True, eq=False)
class TripTable:
    """Columnar trip store; intervals are 1-based"""
    origin: np.ndarray
    destination: np.ndarray
    interval: np.ndarray
    travel_time_s: np.ndarray

    def __len__(self) -> int:
        return len(self.travel_time_s)

    @classmethod
    def empty(cls) -> "TripTable":
        return cls(np.array([], dtype=object), np.array([], dtype=object),
                   np.array([], dtype=int), np.array([], dtype=float))

    @classmethod
    def from_records(cls, records: Iterable[TripObservation]) -> "TripTable":
        records = list(records)
        return cls(
            origin=np.array([r.origin for r in records], dtype=object),
            destination=np.array([r.destination for r in records], dtype=object),
            interval=np.array([r.t for r in records], dtype=int),
            travel_time_s=np.array([r.y for r in records], dtype=float),
        )

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "TripTable":
        return cls(
            origin=df["origin_id"].astype(str).to_numpy(dtype=object),
            destination=df["destination_id"].astype(str).to_numpy(dtype=object),
            interval=df["interval"].astype(int).to_numpy(),
            travel_time_s=df["travel_time_s"].astype(float).to_numpy(),
        )

    def records(self) -> list[TripObservation]:
        return [TripObservation(origin=o, destination=d, t=int(t), y=float(y))
                for o, d, t, y in zip(self.origin, self.destination, self.interval, self.travel_time_s)]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "origin_id": self.origin,
            "destination_id": self.destination,
            "interval": self.interval.astype(int),
            "travel_time_s": self.travel_time_s.astype(float),
        }, columns=TRIP_COLUMNS)

    def subset(self, index) -> "TripTable":
        return TripTable(self.origin[index], self.destination[index],
                         self.interval[index], self.travel_time_s[index])

    @property
    def t0(self) -> np.ndarray:
        return self.interval - 1

    def od_index(self, table: PathTable) -> np.ndarray:
        """Position of each trip's O-D pair in the path table"""
        idx = np.empty(len(self), dtype=int)
        missing = []
        for i, od in enumerate(zip(self.origin, self.destination)):
            pos = table.od_index.get(od)
            if pos is None:
                missing.append(f"trip {i}: no path set for {od[0]}->{od[1]}")
                pos = -1
            idx[i] = pos
        if missing:
            raise DataValidationError("Trips reference O-D pairs without paths", missing)
        return idx

    def content_hash(self) -> str:
        buf = io.StringIO()
        self.to_frame().to_csv(buf, index=False)
        return hashlib.sha256(buf.getvalue().encode()).hexdigest()


def _read_version(path: str) -> tuple[int, int]:
    """Schema version from the leading comment line, and the number of comment lines"""
    version, skipped = TRIP_SCHEMA_VERSION, 0
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            if not line.startswith('#'):
                break
            skipped += 1
            key, _, value = line[1:].strip().partition('=')
            if key.strip() == 'trip_schema':
                try:
                    version = int(value)
                except ValueError:
                    raise DataValidationError(f"Unreadable trip schema version '{value.strip()}'")
    return version, skipped


def _clock_to_interval(clock: pd.Series, start_minutes: int, interval_minutes: int) -> pd.Series:
    parts = clock.str.strip().str.extract(r'^(\d{1,2}):(\d{2})$')
    minutes = pd.to_numeric(parts[0], errors='coerce') * 60 + pd.to_numeric(parts[1], errors='coerce')
    return np.floor((minutes - start_minutes) / interval_minutes) + 1


def ingest_trips(path: str, net: NetworkModel, n_intervals: int, interval_start_minutes: int = 360,
                 interval_minutes: int = 30, max_malformed_fraction: float = 0.001) -> TripTable:
    """
    Read and validate a trip file. Every malformed row is reported with its
    line number and the violated rule; the file is rejected when more than
    max_malformed_fraction of the rows are malformed, otherwise those rows are
    dropped.
    """
    if not os.path.exists(path):
        raise DataValidationError(f"Trip file not found: {path}")
    version, skipped = _read_version(path)
    if version > TRIP_SCHEMA_VERSION:
        raise DataValidationError(
            f"Trip file uses schema version {version}, this build reads up to {TRIP_SCHEMA_VERSION}")

    try:
        df = pd.read_csv(path, comment='#', dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise DataValidationError(f"Trip file {path} has no header",
                                  [f"expected header: {','.join(TRIP_COLUMNS)}"])
    use_clock = "interval" not in df.columns and CLOCK_COLUMN in df.columns
    expected = ["origin_id", "destination_id", CLOCK_COLUMN if use_clock else "interval", "travel_time_s"]
    missing = [c for c in expected if c not in df.columns]
    if missing:
        raise DataValidationError(f"Trip file {path} is missing columns {missing}",
                                  [f"expected header: {','.join(expected)}"])
    if df.empty:
        logger.info(f"[Ingest] {path}: no trips")
        return TripTable.empty()

    line_no = np.arange(len(df)) + skipped + 2
    origin = df["origin_id"].str.strip()
    destination = df["destination_id"].str.strip()
    y = pd.to_numeric(df["travel_time_s"], errors='coerce')

    dropped_window = np.zeros(len(df), dtype=bool)
    if use_clock:
        interval = _clock_to_interval(df[CLOCK_COLUMN], interval_start_minutes, interval_minutes)
        bad_clock = interval.isna()
        dropped_window = (~bad_clock & ((interval < 1) | (interval > n_intervals))).to_numpy()
    else:
        interval = pd.to_numeric(df["interval"], errors='coerce')

    stations = set(net.station_ids)
    problems: list[str] = []
    bad = np.zeros(len(df), dtype=bool)

    def flag(mask, column, rule):
        mask = np.asarray(mask, dtype=bool) & ~dropped_window
        for ln in line_no[mask]:
            problems.append(f"line {ln}: {column}: {rule}")
        bad[mask] = True

    flag(~origin.isin(stations), "origin_id", "unknown station")
    flag(~destination.isin(stations), "destination_id", "unknown station")
    flag((origin == destination).to_numpy(), "destination_id", "origin equals destination")
    known = origin.isin(stations) & destination.isin(stations) & (origin != destination)
    no_paths = [(o, d) not in net.path_sets for o, d in zip(origin, destination)]
    flag(known.to_numpy() & np.asarray(no_paths), "destination_id", "no path set for this O-D pair")
    if use_clock:
        flag(interval.isna().to_numpy(), CLOCK_COLUMN, "must be HH:MM")
    else:
        whole = interval.notna() & (interval == np.floor(interval))
        flag(~whole.to_numpy(), "interval", "must be an integer")
        flag((whole & ((interval < 1) | (interval > n_intervals))).to_numpy(),
             "interval", f"must be in [1, {n_intervals}]")
    flag(y.isna().to_numpy(), "travel_time_s", "must be a number")
    flag((y.notna() & ~(np.isfinite(y) & (y > 0))).to_numpy(), "travel_time_s", "must be positive")

    n_bad = int(bad.sum())
    if n_bad:
        fraction = n_bad / len(df)
        if fraction > max_malformed_fraction:
            raise DataValidationError(
                f"{n_bad} of {len(df)} trip rows are malformed ({fraction:.2%} > {max_malformed_fraction:.2%})",
                problems)
        logger.warning(f"[Ingest] Dropping {n_bad} malformed rows from {path}")
        for msg in problems[:20]:
            logger.warning(f"[Ingest]   {msg}")
    if dropped_window.any():
        logger.warning(f"[Ingest] Dropped {int(dropped_window.sum())} trips outside the "
                       f"{n_intervals} x {interval_minutes} min window")

    keep = ~bad & ~dropped_window
    table = TripTable(
        origin=origin[keep].to_numpy(dtype=object),
        destination=destination[keep].to_numpy(dtype=object),
        interval=interval[keep].astype(int).to_numpy(),
        travel_time_s=y[keep].astype(float).to_numpy(),
    )
    logger.info(f"[Ingest] {path}: {len(table)} trips accepted")
    return table


def write_trips(trips: TripTable, path: str, extra: Optional[dict] = None) -> None:
    """Write trips in the versioned CSV format; extra columns are appended"""
    df = trips.to_frame()
    for name, values in (extra or {}).items():
        df[name] = values
    with open(path, 'w', encoding='utf-8', newline='') as f:
        f.write(f"#trip_schema={TRIP_SCHEMA_VERSION}\n")
        df.to_csv(f, index=False)
