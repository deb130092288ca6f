"""Hourly electricity price series: CSV ingestion and a synthetic generator.

CSV schema: header ``timestamp,price``; ISO-8601 timestamps on a strict
hourly grid.  Timezone-aware stamps are converted to UTC.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

DEFAULT_EVAL_START = "2018-03-26T00:00"
HOUR = np.timedelta64(1, "h")


class PriceDataError(ValueError):
    pass


@dataclass
class PriceSeries:
    timestamps: np.ndarray   # datetime64[h], strictly hourly
    prices: np.ndarray
    eval_start: np.datetime64

    @property
    def is_eval(self) -> np.ndarray:
        return self.timestamps >= self.eval_start

    def partition(self, name: str) -> np.ndarray:
        if name == "train":
            return self.prices[~self.is_eval]
        if name == "eval":
            return self.prices[self.is_eval]
        raise ValueError(f"unknown partition {name!r}")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["timestamp", "price"])
            for ts, p in zip(self.timestamps, self.prices):
                w.writerow([str(ts) + ":00", repr(float(p))])


def _parse_stamp(text: str) -> np.datetime64:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is not None:
        dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
    if dt.minute or dt.second or dt.microsecond:
        raise ValueError("timestamp not on the hour")
    return np.datetime64(dt, "h")


def ingest_prices(path, eval_start=DEFAULT_EVAL_START) -> PriceSeries:
    """Parse, validate and partition an hourly price CSV."""
    stamps, values, bad = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:2]] != ["timestamp", "price"]:
            raise PriceDataError("price CSV must start with header 'timestamp,price'")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                stamps.append(_parse_stamp(row[0]))
                values.append(float(row[1]))
            except (ValueError, IndexError) as exc:
                bad.append(f"line {lineno}: {exc}")
    if bad:
        raise PriceDataError("unparseable rows: " + "; ".join(bad))
    if not stamps:
        raise PriceDataError("price CSV has no data rows")
    ts = np.array(stamps, dtype="datetime64[h]")
    steps = np.diff(ts)
    if np.any(steps <= np.timedelta64(0, "h")):
        i = int(np.argmax(steps <= np.timedelta64(0, "h")))
        raise PriceDataError(f"timestamps not strictly increasing at {ts[i + 1]}")
    missing = []
    for i in np.nonzero(steps != HOUR)[0]:
        t = ts[i] + HOUR
        while t < ts[i + 1]:
            missing.append(str(t))
            t += HOUR
    if missing:
        raise PriceDataError("missing hours: " + ", ".join(missing))
    prices = np.array(values, dtype=np.float64)
    if not np.all(np.isfinite(prices)):
        raise PriceDataError("non-finite price values")
    return PriceSeries(ts, prices, np.datetime64(eval_start, "h"))


def synthetic_prices(start="2015-03-29T00:00", end="2018-09-30T23:00", seed=0,
                     eval_start=DEFAULT_EVAL_START, base=40.0, daily=12.0, weekly=5.0,
                     noise=3.0) -> PriceSeries:
    """Daily and weekly sinusoids plus AR(1) noise, all-positive in practice.

    The daily profile peaks in the early evening and bottoms out at night;
    weekends are cheaper.  Deterministic for a given ``seed`` (default 0).
    """
    ts = np.arange(np.datetime64(start, "h"), np.datetime64(end, "h") + HOUR, HOUR)
    hours = (ts - ts[0]).astype(np.int64).astype(np.float64)
    hour_of_day = ts.astype("datetime64[h]").astype(np.int64) % 24
    day_index = ts.astype("datetime64[D]").astype(np.int64)
    dow = (day_index + 3) % 7  # 0 = Monday
    rng = np.random.default_rng(seed)
    eps = rng.normal(0.0, noise, size=len(ts))
    ar = np.zeros(len(ts))
    for i in range(1, len(ts)):
        ar[i] = 0.8 * ar[i - 1] + eps[i]
    p = (base
         + daily * np.sin(2 * np.pi * (hour_of_day - 12.0) / 24.0)
         + 0.4 * daily * np.sin(4 * np.pi * (hour_of_day - 4.0) / 24.0)
         - weekly * (dow >= 5)
         + weekly * 0.5 * np.sin(2 * np.pi * hours / (24.0 * 7.0))
         + ar)
    return PriceSeries(ts, p, np.datetime64(eval_start, "h"))
