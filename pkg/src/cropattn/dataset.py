"""Parcel time series: ingestion, synthesis, aggregation and batching.

A parcel is one agricultural field whose 13 Sentinel-2 band reflectances have
been averaged over its pixels, one vector per acquisition date.  Everything
here works on plain numpy arrays and :class:`datetime.date` objects.
"""
from __future__ import annotations

import configparser
import csv
import datetime as dt
import hashlib
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DegenerateInput,
    EmptyDataset,
    InvalidConfig,
    LengthExceeded,
    OddDimension,
    ParseError,
    SchemaError,
    TooShort,
)

log = logging.getLogger(__name__)

NUM_BANDS = 13
BAND_NAMES = ("B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B9", "B10", "B11", "B12")
# positions of B4 / B8 in the band order above
RED_INDEX = 3
NIR_INDEX = 7
SPLIT_NAMES = ("train", "validation", "test")


def ndvi(nir, red):
    """Normalized difference vegetation index ``(nir - red) / (nir + red)``.

    Works on scalars and arrays.  A zero denominator anywhere raises
    :class:`DegenerateInput`.
    """
    nir = np.asarray(nir, dtype=float)
    red = np.asarray(red, dtype=float)
    total = nir + red
    if np.any(total == 0):
        raise DegenerateInput("nir + red == 0: dark or invalid pixel")
    out = (nir - red) / total
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class Observation:
    acquisition_date: dt.date
    bands: np.ndarray

    def __post_init__(self):
        bands = np.asarray(self.bands, dtype=float)
        if bands.shape != (NUM_BANDS,):
            raise SchemaError(f"expected {NUM_BANDS} bands, got shape {bands.shape}")
        if not np.all(np.isfinite(bands)):
            raise ParseError("non-finite band value")
        object.__setattr__(self, "bands", bands)

    @property
    def day_of_year(self) -> int:
        return self.acquisition_date.timetuple().tm_yday


@dataclass(frozen=True, eq=False)
class ParcelSeries:
    """Date-sorted observations of one parcel.

    ``bands`` has shape ``[T, 13]`` and row ``i`` belongs to ``dates[i]``.
    """

    parcel_id: str
    crop: str
    dates: tuple
    bands: np.ndarray

    def __post_init__(self):
        dates = tuple(self.dates)
        bands = np.asarray(self.bands, dtype=float)
        if len(dates) == 0:
            raise EmptyDataset(f"parcel {self.parcel_id!r} has no observations")
        if bands.shape != (len(dates), NUM_BANDS):
            raise SchemaError(
                f"parcel {self.parcel_id!r}: bands shape {bands.shape} does not match "
                f"{len(dates)} dates x {NUM_BANDS} bands"
            )
        if not np.all(np.isfinite(bands)):
            raise ParseError(f"parcel {self.parcel_id!r}: non-finite band value")
        if any(a >= b for a, b in zip(dates, dates[1:])):
            raise ParseError(f"parcel {self.parcel_id!r}: dates not strictly increasing")
        bands.setflags(write=False)
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "bands", bands)

    @classmethod
    def from_observations(cls, parcel_id: str, crop: str, observations: Iterable[Observation]):
        obs = sorted(observations, key=lambda o: o.acquisition_date)
        return cls(parcel_id, crop, tuple(o.acquisition_date for o in obs),
                   np.array([o.bands for o in obs]).reshape(len(obs), NUM_BANDS))

    def __len__(self):
        return len(self.dates)

    def __eq__(self, other):
        if not isinstance(other, ParcelSeries):
            return NotImplemented
        return (self.parcel_id == other.parcel_id and self.crop == other.crop
                and self.dates == other.dates and np.array_equal(self.bands, other.bands))

    @property
    def observations(self) -> list[Observation]:
        return [Observation(d, b) for d, b in zip(self.dates, self.bands)]

    @property
    def days_of_year(self) -> np.ndarray:
        return np.array([d.timetuple().tm_yday for d in self.dates], dtype=int)

    def ndvi(self, nir_index: int = NIR_INDEX, red_index: int = RED_INDEX) -> np.ndarray:
        return ndvi(self.bands[:, nir_index], self.bands[:, red_index])


@dataclass(eq=False)
class Dataset:
    parcels: list
    class_vocabulary: list
    splits: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.parcels:
            raise EmptyDataset("dataset has no parcels")
        vocab = set(self.class_vocabulary)
        if len(vocab) != len(self.class_vocabulary):
            raise InvalidConfig("duplicate labels in class vocabulary")
        for p in self.parcels:
            if p.crop not in vocab:
                raise SchemaError(f"crop {p.crop!r} of parcel {p.parcel_id!r} not in vocabulary")
        seen: set[int] = set()
        splits = {}
        for name, idx in self.splits.items():
            idx = np.asarray(idx, dtype=int)
            if idx.size and (idx.min() < 0 or idx.max() >= len(self.parcels)):
                raise InvalidConfig(f"split {name!r} indexes outside the dataset")
            if seen.intersection(idx.tolist()):
                raise InvalidConfig(f"split {name!r} overlaps another split")
            seen.update(idx.tolist())
            splits[name] = idx
        self.splits = splits

    def __len__(self):
        return len(self.parcels)

    @property
    def date_axis(self) -> list:
        return sorted({d for p in self.parcels for d in p.dates})

    @property
    def max_length(self) -> int:
        return max(len(p) for p in self.parcels)

    def label_index(self, crop: str) -> int:
        return self.class_vocabulary.index(crop)

    def split(self, name: str | None) -> list:
        """Parcels of a named split; ``None`` means every parcel."""
        if name is None:
            return list(self.parcels)
        if name not in self.splits:
            raise KeyError(f"dataset has no split {name!r}")
        return [self.parcels[i] for i in self.splits[name]]

    def subset(self, keep: Sequence[bool] | np.ndarray, class_vocabulary=None) -> "Dataset":
        """New dataset with only parcels where ``keep`` is true; splits are remapped."""
        keep = np.asarray(keep, dtype=bool)
        new_index = np.cumsum(keep) - 1
        parcels = [p for p, k in zip(self.parcels, keep) if k]
        splits = {name: new_index[idx[keep[idx]]] for name, idx in self.splits.items()}
        vocab = list(self.class_vocabulary if class_vocabulary is None else class_vocabulary)
        return Dataset(parcels, vocab, splits)

    def with_parcels(self, parcels: list) -> "Dataset":
        """Same splits and vocabulary, parcel list replaced one-for-one."""
        if len(parcels) != len(self.parcels):
            raise InvalidConfig("with_parcels needs a one-for-one replacement")
        return Dataset(list(parcels), list(self.class_vocabulary), dict(self.splits))

    def fingerprint(self) -> str:
        """sha256 over the canonical serialization."""
        buf = io.StringIO()
        _write_parcels_csv(self, buf)
        h = hashlib.sha256(buf.getvalue().encode())
        for name in sorted(self.splits):
            h.update(name.encode() + b":" + ",".join(map(str, self.splits[name].tolist())).encode())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# CSV ingestion


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping from the canonical field names to file headers."""

    parcel_id: str = "parcel_id"
    date: str = "date"
    bands: tuple = tuple(f"b{i}" for i in range(1, NUM_BANDS + 1))
    crop: str = "crop"


def _parse_date(text: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError as exc:
        raise ParseError(f"bad ISO-8601 date {text!r}") from exc


def load_dataset(path, schema: CsvSchema | None = None, divisor: float = 10000.0,
                 split_fractions=(0.7, 0.15, 0.15), seed: int = 0,
                 split_file=None) -> Dataset:
    """Read a long-format CSV (one row per parcel and date) into a :class:`Dataset`.

    Reflectances are divided by ``divisor``.  Splits come from ``split_file``
    when given, otherwise a stratified random split is drawn with ``seed``.
    """
    schema = schema or CsvSchema()
    if len(schema.bands) != NUM_BANDS:
        raise SchemaError(f"schema must name {NUM_BANDS} band columns")
    if divisor <= 0:
        raise InvalidConfig("divisor must be positive")
    rows: dict[str, list] = {}
    crops: dict[str, str] = {}
    vocab: list[str] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        required = [schema.parcel_id, schema.date, schema.crop, *schema.bands]
        missing = [c for c in required if c not in header]
        if missing:
            raise SchemaError(f"missing columns: {', '.join(missing)}")
        for lineno, row in enumerate(reader, start=2):
            if None in row or any(row[c] is None for c in required):
                raise ParseError(f"line {lineno}: wrong number of fields")
            pid = row[schema.parcel_id].strip()
            crop = row[schema.crop].strip()
            if not pid or not crop:
                raise ParseError(f"line {lineno}: empty parcel id or crop")
            try:
                bands = np.array([float(row[c]) for c in schema.bands]) / divisor
            except ValueError as exc:
                raise ParseError(f"line {lineno}: {exc}") from exc
            if not np.all(np.isfinite(bands)):
                raise ParseError(f"line {lineno}: non-finite band value")
            if pid in crops and crops[pid] != crop:
                raise ParseError(f"line {lineno}: parcel {pid!r} changes crop")
            crops[pid] = crop
            if crop not in vocab:
                vocab.append(crop)
            rows.setdefault(pid, []).append(Observation(_parse_date(row[schema.date]), bands))
    if not rows:
        raise EmptyDataset(f"{path}: no data rows")
    parcels = []
    for pid, obs in rows.items():
        dates = [o.acquisition_date for o in obs]
        if len(set(dates)) != len(dates):
            raise ParseError(f"parcel {pid!r} has duplicate acquisition dates")
        parcels.append(ParcelSeries.from_observations(pid, crops[pid], obs))
    dataset = Dataset(parcels, vocab)
    if split_file is not None:
        return replace_splits(dataset, read_split_file(split_file, dataset))
    return replace_splits(dataset, stratified_split(dataset, split_fractions, seed))


def stratified_split(dataset: Dataset, fractions=(0.7, 0.15, 0.15), seed: int = 0) -> dict:
    """Per-class shuffled split into train/validation/test index arrays."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise InvalidConfig(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    out = {name: [] for name in SPLIT_NAMES}
    for crop in dataset.class_vocabulary:
        idx = np.array([i for i, p in enumerate(dataset.parcels) if p.crop == crop], dtype=int)
        idx = idx[rng.permutation(len(idx))]
        n_train = int(round(fractions[0] * len(idx)))
        n_val = int(round(fractions[1] * len(idx)))
        out["train"].extend(idx[:n_train])
        out["validation"].extend(idx[n_train:n_train + n_val])
        out["test"].extend(idx[n_train + n_val:])
    return {name: np.sort(np.array(v, dtype=int)) for name, v in out.items()}


def replace_splits(dataset: Dataset, splits: Mapping) -> Dataset:
    return Dataset(dataset.parcels, dataset.class_vocabulary, dict(splits))


def read_split_file(path, dataset: Dataset) -> dict:
    """Split definitions as ``name = id1,id2,...`` lines."""
    values = read_keyvalue(path)
    by_id = {p.parcel_id: i for i, p in enumerate(dataset.parcels)}
    splits = {}
    for name, ids in values.items():
        try:
            splits[name] = np.array(sorted(by_id[s.strip()] for s in ids.split(",") if s.strip()), dtype=int)
        except KeyError as exc:
            raise InvalidConfig(f"split {name!r} names unknown parcel {exc.args[0]!r}") from None
    return splits


def write_split_file(path, dataset: Dataset) -> None:
    lines = [f"{name} = " + ",".join(dataset.parcels[i].parcel_id for i in idx)
             for name, idx in dataset.splits.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_keyvalue(path_or_text, *, is_text: bool = False) -> dict:
    """Parse a plain ``key = value`` file (``#`` comments allowed) into a dict."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str
    text = path_or_text if is_text else Path(path_or_text).read_text(encoding="utf-8")
    try:
        parser.read_string("[root]\n" + text)
    except configparser.Error as exc:
        raise InvalidConfig(f"malformed key=value file: {exc}") from exc
    return dict(parser["root"])


# canonical on-disk form: normalized floats, exact repr round trip

def _write_parcels_csv(dataset: Dataset, fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["parcel_id", "date", *[f"b{i}" for i in range(1, NUM_BANDS + 1)], "crop"])
    for p in dataset.parcels:
        for d, b in zip(p.dates, p.bands):
            writer.writerow([p.parcel_id, d.isoformat(), *map(repr, b.tolist()), p.crop])


def save_dataset(dataset: Dataset, directory) -> list[Path]:
    """Write ``parcels.csv`` (reflectances already normalized) and ``splits.cfg``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    data_path = directory / "parcels.csv"
    with open(data_path, "w", newline="", encoding="utf-8") as fh:
        _write_parcels_csv(dataset, fh)
    split_path = directory / "splits.cfg"
    write_split_file(split_path, dataset)
    return [data_path, split_path]


def read_dataset(directory) -> Dataset:
    """Inverse of :func:`save_dataset`."""
    directory = Path(directory)
    data_path = directory / "parcels.csv"
    if not data_path.exists():
        raise FileNotFoundError(f"{data_path} does not exist")
    split_path = directory / "splits.cfg"
    return load_dataset(data_path, divisor=1.0,
                        split_file=split_path if split_path.exists() else None)


# ---------------------------------------------------------------------------
# synthetic phenology generator


@dataclass(frozen=True)
class CropPhenology:
    """Double-logistic NDVI curve plus optional additive NDVI windows.

    ``windows`` holds ``(first_day, last_day, ndvi_shift)`` triples; the
    shift is added for days of year inside the closed interval.
    """

    name: str
    green_up: float = 100.0
    senescence: float = 250.0
    peak: float = 0.8
    baseline: float = 0.15
    slope_up: float = 0.1
    slope_down: float = 0.1
    windows: tuple = ()

    def validate(self):
        if not self.green_up < self.senescence:
            raise InvalidConfig(f"{self.name}: green_up must precede senescence")
        if not 0 <= self.baseline < self.peak <= 1:
            raise InvalidConfig(f"{self.name}: need 0 <= baseline < peak <= 1")
        if self.slope_up <= 0 or self.slope_down <= 0:
            raise InvalidConfig(f"{self.name}: slopes must be positive")
        for lo, hi, _ in self.windows:
            if lo > hi:
                raise InvalidConfig(f"{self.name}: window ({lo}, {hi}) is reversed")


def double_logistic(day, green_up, senescence, peak, baseline, slope_up, slope_down):
    day = np.asarray(day, dtype=float)
    rise = 1.0 / (1.0 + np.exp(-slope_up * (day - green_up)))
    fall = 1.0 / (1.0 + np.exp(-slope_down * (day - senescence)))
    return baseline + (peak - baseline) * (rise - fall)


def phenology_curve(crop: CropPhenology, day, shift_days: float = 0.0) -> np.ndarray:
    """NDVI of ``crop`` at the given days of year, clipped to [-1, 1]."""
    day = np.asarray(day, dtype=float)
    curve = double_logistic(day, crop.green_up + shift_days, crop.senescence + shift_days,
                            crop.peak, crop.baseline, crop.slope_up, crop.slope_down)
    for lo, hi, delta in crop.windows:
        curve = curve + np.where((day >= lo) & (day <= hi), delta, 0.0)
    return np.clip(curve, -1.0, 1.0)


@dataclass(frozen=True)
class SyntheticConfig:
    crops: tuple
    schedule: tuple = tuple(range(1, 366, 5))  # days of year
    year: int = 2018
    noise_std: float = 0.0
    parcels_per_class: int = 50
    observation_probability: float = 1.0
    jitter_days: float = 0.0
    seed: int = 0
    split_fractions: tuple = (0.7, 0.15, 0.15)

    def validate(self):
        if not self.crops:
            raise InvalidConfig("at least one crop is required")
        names = [c.name for c in self.crops]
        if len(set(names)) != len(names):
            raise InvalidConfig("crop names must be unique")
        for c in self.crops:
            c.validate()
        if not self.schedule or any(not 1 <= d <= 366 for d in self.schedule):
            raise InvalidConfig("schedule days must lie in 1..366")
        if len(set(self.schedule)) != len(self.schedule):
            raise InvalidConfig("schedule has duplicate days")
        if self.noise_std < 0 or self.jitter_days < 0:
            raise InvalidConfig("noise_std and jitter_days must be non-negative")
        if self.parcels_per_class < 1:
            raise InvalidConfig("parcels_per_class must be >= 1")
        if not 0 < self.observation_probability <= 1:
            raise InvalidConfig("observation_probability must be in (0, 1]")


SYNTH_SUM = 0.8  # NIR + RED
SYNTH_OTHER_BANDS = 0.3


def generate_synthetic(config: SyntheticConfig) -> Dataset:
    """Draw a dataset whose NDVI follows each crop's phenology curve.

    RED and NIR are solved from NDVI with ``NIR + RED = 0.8``; the other 11
    bands are ``0.3`` plus noise.  With ``noise_std > 0`` the NDVI itself is
    also perturbed.  Output depends only on ``config``.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    schedule = np.array(sorted(config.schedule), dtype=int)
    start = dt.date(config.year, 1, 1)
    all_dates = [start + dt.timedelta(days=int(d) - 1) for d in schedule]
    parcels = []
    for crop in config.crops:
        for i in range(config.parcels_per_class):
            keep = rng.random(len(schedule)) < config.observation_probability
            if not keep.any():
                keep[rng.integers(len(schedule))] = True
            shift = rng.uniform(-config.jitter_days, config.jitter_days) if config.jitter_days else 0.0
            days = schedule[keep]
            curve = phenology_curve(crop, days, shift)
            if config.noise_std:
                curve = np.clip(curve + rng.normal(0.0, config.noise_std, len(days)), -1.0, 1.0)
            bands = np.full((len(days), NUM_BANDS), SYNTH_OTHER_BANDS)
            if config.noise_std:
                bands += rng.normal(0.0, config.noise_std, bands.shape)
            bands[:, NIR_INDEX] = SYNTH_SUM * (1.0 + curve) / 2.0
            bands[:, RED_INDEX] = SYNTH_SUM * (1.0 - curve) / 2.0
            dates = tuple(d for d, k in zip(all_dates, keep) if k)
            parcels.append(ParcelSeries(f"{crop.name}_{i:04d}", crop.name, dates, bands))
    dataset = Dataset(parcels, [c.name for c in config.crops])
    return replace_splits(dataset, stratified_split(dataset, config.split_fractions, config.seed))


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.split(",") if x.strip())


def parse_synthetic_config(values: Mapping[str, str]) -> SyntheticConfig:
    """Build a :class:`SyntheticConfig` from ``key = value`` pairs.

    Global keys: ``seed``, ``noise_std``, ``parcels_per_class``,
    ``observation_probability``, ``jitter_days``, ``year``, ``split``
    (three fractions), and either ``schedule`` (comma-separated days) or
    ``schedule_start``/``schedule_step``/``schedule_count``.  Crops are given
    as ``crop.<name>.<field>``; ``crop.<name>.windows`` takes
    ``lo:hi:shift`` triples separated by ``;``.
    """
    crops: dict[str, dict] = {}
    kw: dict = {}
    try:
        for key, value in values.items():
            if key.startswith("crop."):
                _, name, attr = key.split(".", 2)
                crops.setdefault(name, {})[attr] = value
            elif key in ("seed", "parcels_per_class", "year"):
                kw[key] = int(value)
            elif key in ("noise_std", "observation_probability", "jitter_days"):
                kw[key] = float(value)
            elif key == "split":
                kw["split_fractions"] = _floats(value)
            elif key == "schedule":
                kw["schedule"] = tuple(int(float(x)) for x in value.split(",") if x.strip())
            elif key not in ("schedule_start", "schedule_step", "schedule_count"):
                raise InvalidConfig(f"unknown synthetic config key {key!r}")
        if "schedule_step" in values:
            first = int(values.get("schedule_start", 1))
            step = int(values["schedule_step"])
            count = int(values.get("schedule_count", (366 - first) // step + 1))
            kw["schedule"] = tuple(first + step * i for i in range(count))
        phenologies = []
        for name, attrs in crops.items():
            ckw: dict = {}
            for attr, value in attrs.items():
                if attr == "windows":
                    ckw["windows"] = tuple(tuple(float(x) for x in w.split(":"))
                                           for w in value.split(";") if w.strip())
                elif attr in CropPhenology.__dataclass_fields__ and attr != "name":
                    ckw[attr] = float(value)
                else:
                    raise InvalidConfig(f"unknown crop field {attr!r}")
            phenologies.append(CropPhenology(name, **ckw))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, InvalidConfig):
            raise
        raise InvalidConfig(str(exc)) from exc
    config = SyntheticConfig(crops=tuple(phenologies), **kw)
    config.validate()
    return config


def load_synthetic_config(path) -> SyntheticConfig:
    return parse_synthetic_config(read_keyvalue(path))


# ---------------------------------------------------------------------------
# sequence aggregation


def right_pad(series: ParcelSeries, t_max: int):
    """Zero-pad at the end to ``t_max`` slots.

    Returns ``(rows [t_max, 13], mask [t_max], dates)`` where ``dates`` holds
    only the valid slots.
    """
    t = len(series)
    if t > t_max:
        raise LengthExceeded(f"parcel {series.parcel_id!r} has {t} observations > t_max={t_max}")
    rows = np.zeros((t_max, NUM_BANDS))
    rows[:t] = series.bands
    mask = np.zeros(t_max, dtype=bool)
    mask[:t] = True
    return rows, mask, series.dates


def random_sample(series: ParcelSeries, t_fixed: int, seed: int = 0) -> ParcelSeries:
    """Keep ``t_fixed`` observations drawn without replacement, in date order."""
    if len(series) < t_fixed:
        raise TooShort(f"parcel {series.parcel_id!r} has {len(series)} < {t_fixed} observations")
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(series), size=t_fixed, replace=False))
    return ParcelSeries(series.parcel_id, series.crop, tuple(series.dates[i] for i in keep),
                        series.bands[keep])


def weekly_average(series: ParcelSeries) -> ParcelSeries:
    """Average observations sharing an ISO calendar week.

    The group's first date represents it.
    """
    groups: dict[tuple, list[int]] = {}
    for i, d in enumerate(series.dates):
        iso = d.isocalendar()
        groups.setdefault((iso[0], iso[1]), []).append(i)
    dates = tuple(series.dates[idx[0]] for idx in groups.values())
    bands = np.array([series.bands[idx].mean(axis=0) for idx in groups.values()])
    return ParcelSeries(series.parcel_id, series.crop, dates, bands)


def _day(date_or_day) -> float:
    if isinstance(date_or_day, dt.date):
        return float(date_or_day.timetuple().tm_yday)
    return float(date_or_day)


def positional_encoding(date, dim: int) -> np.ndarray:
    """Sinusoidal encoding of the day of year (``0`` for padded slots)."""
    return positional_encodings(np.array([_day(date)]), dim)[0]


def positional_encodings(days, dim: int) -> np.ndarray:
    """Vectorized :func:`positional_encoding` over an array of days of year."""
    if dim % 2:
        raise OddDimension(f"encoding dimension must be even, got {dim}")
    days = np.asarray(days, dtype=float)
    freq = 10000.0 ** (-np.arange(0, dim, 2) / dim)
    angle = days[..., None] * freq
    out = np.empty(days.shape + (dim,))
    out[..., 0::2] = np.sin(angle)
    out[..., 1::2] = np.cos(angle)
    return out


@dataclass
class PaddedBatch:
    inputs: np.ndarray          # [B, T, 13]
    validity_mask: np.ndarray   # [B, T] bool
    days: np.ndarray            # [B, T] day of year, 0 on padded slots
    dates: list                 # per parcel, tuple of valid dates
    labels: np.ndarray          # [B] int
    parcel_ids: list
    crops: list

    def __len__(self):
        return len(self.labels)

    @property
    def valid_lengths(self) -> np.ndarray:
        return self.validity_mask.sum(axis=1)


def make_batch(parcels: Sequence[ParcelSeries], t_max: int, class_vocabulary: Sequence[str]) -> PaddedBatch:
    """Right-pad ``parcels`` into one model-ready batch."""
    index = {c: i for i, c in enumerate(class_vocabulary)}
    b = len(parcels)
    inputs = np.zeros((b, t_max, NUM_BANDS))
    mask = np.zeros((b, t_max), dtype=bool)
    days = np.zeros((b, t_max), dtype=int)
    labels = np.empty(b, dtype=int)
    for i, p in enumerate(parcels):
        inputs[i], mask[i], _ = right_pad(p, t_max)
        days[i, :len(p)] = p.days_of_year
        try:
            labels[i] = index[p.crop]
        except KeyError:
            raise SchemaError(f"crop {p.crop!r} not in the model vocabulary") from None
    return PaddedBatch(inputs, mask, days, [p.dates for p in parcels], labels,
                       [p.parcel_id for p in parcels], [p.crop for p in parcels])


def iter_batches(parcels: Sequence[ParcelSeries], batch_size: int, t_max: int, class_vocabulary,
                 order=None):
    order = np.arange(len(parcels)) if order is None else order
    for start in range(0, len(order), batch_size):
        yield make_batch([parcels[i] for i in order[start:start + batch_size]], t_max, class_vocabulary)
