"""Dataset ingestion, chronological splits, windowing and observation masks."""

import csv
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

TIMESTAMP_COLUMNS = ("date", "timestamp")
STD_FLOOR = 1e-8
RNG_ALGORITHMS = ("philox", "pcg64")


@dataclass
class Dataset:
    channel_names: list
    values: np.ndarray
    timestamps: list = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError(f"values must be 2-D, got shape {self.values.shape}")
        if self.values.shape[1] != len(self.channel_names):
            raise DataError(
                f"{len(self.channel_names)} channel names for {self.values.shape[1]} columns"
            )
        if len(set(self.channel_names)) != len(self.channel_names):
            raise DataError("channel names must be unique")
        if self.timestamps is not None and len(self.timestamps) != len(self.values):
            raise DataError("timestamps and values differ in length")

    @property
    def n_steps(self):
        return self.values.shape[0]

    @property
    def n_channels(self):
        return self.values.shape[1]

    def slice(self, start, stop):
        ts = None if self.timestamps is None else list(self.timestamps[start:stop])
        return Dataset(list(self.channel_names), self.values[start:stop].copy(), ts)


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, values):
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, values):
        return np.asarray(values, dtype=np.float64) * self.std + self.mean

    @classmethod
    def fit(cls, values):
        values = np.asarray(values, dtype=np.float64)
        mean = values.mean(axis=0)
        std = np.maximum(values.std(axis=0), STD_FLOOR)
        return cls(mean, std)


@dataclass
class TimeSeriesWindow:
    values: np.ndarray
    start_index: int = 0

    @property
    def shape(self):
        return self.values.shape


@dataclass
class ObservationMask:
    m: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.float64)
        if not np.all((self.m == 0.0) | (self.m == 1.0)):
            raise DataError("mask must be binary")

    @property
    def missing_count(self):
        return int(self.m.size - self.m.sum())


def load_csv(path):
    """Read a headered CSV into a :class:`Dataset`.

    A first column named ``date`` or ``timestamp`` is kept as opaque labels.
    Rows are numbered from 1 for the first data row in error messages.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r and any(cell.strip() for cell in r)]
    if not body:
        raise DataError(f"{path}: no data rows")
    has_ts = header[0].lower() in TIMESTAMP_COLUMNS
    names = header[1:] if has_ts else header
    if not names:
        raise DataError(f"{path}: no value columns")
    values = np.empty((len(body), len(names)))
    timestamps = [] if has_ts else None
    for i, row in enumerate(body, start=1):
        if len(row) != len(header):
            raise DataError(f"{path}: row {i} has {len(row)} fields, expected {len(header)}")
        if has_ts:
            timestamps.append(row[0].strip())
            row = row[1:]
        for j, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}: row {i}, column {names[j]!r}: cannot parse {cell.strip()!r}"
                ) from None
            if not math.isfinite(v):
                raise DataError(f"{path}: row {i}, column {names[j]!r}: non-finite value")
            values[i - 1, j] = v
    return Dataset(names, values, timestamps)


def write_csv(ds, path):
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        header = list(ds.channel_names)
        if ds.timestamps is not None:
            header = ["date"] + header
        w.writerow(header)
        for i, row in enumerate(ds.values):
            cells = [repr(float(v)) for v in row]
            if ds.timestamps is not None:
                cells = [ds.timestamps[i]] + cells
            w.writerow(cells)


def split_sizes(n, fractions):
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise DataError(f"split fractions must be three positive numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions must sum to 1, got {sum(fractions)}")
    n_train = int(math.floor(n * fractions[0]))
    n_val = int(math.floor(n * fractions[1]))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) <= 0:
        raise DataError(f"split of {n} rows by {fractions} leaves an empty part")
    return n_train, n_val, n_test


def split_and_normalize(ds, fractions=(0.7, 0.1, 0.2)):
    """Chronological train/val/test split, z-scored with train statistics."""
    n_train, n_val, _ = split_sizes(ds.n_steps, fractions)
    parts = [
        ds.slice(0, n_train),
        ds.slice(n_train, n_train + n_val),
        ds.slice(n_train + n_val, ds.n_steps),
    ]
    stats = NormalizationStats.fit(parts[0].values)
    for p in parts:
        p.values = stats.normalize(p.values)
    return tuple(parts), stats


def make_windows(ds, seq_len=96, stride=1):
    if seq_len < 2:
        raise ValueError("seq_len must be at least 2")
    if stride < 1:
        raise ValueError("stride must be at least 1")
    values = ds.values if isinstance(ds, Dataset) else np.asarray(ds, dtype=np.float64)
    return [
        TimeSeriesWindow(values[s:s + seq_len].copy(), s)
        for s in range(0, values.shape[0] - seq_len + 1, stride)
    ]


def stack_windows(windows, n_channels=None):
    """``(W, L, C)`` array from a list of windows."""
    if not windows:
        if n_channels is None:
            raise ValueError("cannot infer shape of an empty window list")
        return np.zeros((0, 0, n_channels))
    return np.stack([w.values for w in windows])


def make_rng(seed, algorithm="philox"):
    """Seeded generator. ``philox`` is numpy's Philox4x64-10 counter-based bit generator."""
    seed = int(seed)
    if algorithm == "philox":
        return np.random.Generator(np.random.Philox(seed))
    if algorithm == "pcg64":
        return np.random.Generator(np.random.PCG64(seed))
    raise ValueError(f"unknown rng algorithm {algorithm!r}; expected one of {RNG_ALGORITHMS}")


def substream(seed, name, algorithm="philox"):
    """Independent generator for a named purpose (``"val-mask"``, ``"batches"``...) under one seed."""
    ss = np.random.SeedSequence([int(seed) & (2 ** 64 - 1), zlib.crc32(name.encode("utf-8"))])
    if algorithm == "philox":
        return np.random.Generator(np.random.Philox(ss))
    if algorithm == "pcg64":
        return np.random.Generator(np.random.PCG64(ss))
    raise ValueError(f"unknown rng algorithm {algorithm!r}; expected one of {RNG_ALGORITHMS}")


def gen_mask(shape, ratio, rng, mode="bernoulli"):
    """Observation mask with 1 = observed, 0 = missing.

    ``bernoulli`` drops each entry independently with probability ``ratio``.
    ``exact`` drops ``round(ratio * size)`` entries chosen uniformly.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1], got {ratio}")
    shape = tuple(int(s) for s in shape)
    if mode == "bernoulli":
        return (rng.random(shape) >= ratio).astype(np.float64)
    if mode == "exact":
        size = int(np.prod(shape))
        n_missing = int(round(ratio * size))
        m = np.ones(size)
        m[rng.permutation(size)[:n_missing]] = 0.0
        return m.reshape(shape)
    raise ValueError(f"unknown mask mode {mode!r}")


def synthetic_sinusoids(n_steps=2000, n_channels=4, n_components=3, noise=0.1, seed=0):
    """Channels mixing ``n_components`` shared sinusoids plus Gaussian noise.

    Periods are drawn from [12, 60] steps; each channel has its own mixing
    weights and phases, so neighbouring channels carry information about each
    other.
    """
    rng = make_rng(seed)
    t = np.arange(n_steps, dtype=np.float64)
    periods = rng.uniform(12.0, 60.0, size=n_components)
    weights = rng.uniform(0.3, 1.0, size=(n_components, n_channels))
    phases = rng.uniform(0.0, 2 * np.pi, size=(n_components, n_channels))
    values = np.zeros((n_steps, n_channels))
    for k in range(n_components):
        values += weights[k] * np.sin(2 * np.pi * t[:, None] / periods[k] + phases[k])
    values += noise * rng.standard_normal(values.shape)
    names = [f"ch{c}" for c in range(n_channels)]
    return Dataset(names, values)
