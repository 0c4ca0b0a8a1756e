"""Turn attention matrices into date importances, key dates and phenology summaries."""
from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .dataset import NIR_INDEX, RED_INDEX, Dataset, ParcelSeries, ndvi
from .errors import (
    DateAbsent,
    DegenerateInput,
    EmptyInput,
    EmptyRecord,
    EmptyResult,
    NoParcelsForCrop,
    TopTooLarge,
)
from .model import AttentionRecord, Checkpoint, ModelConfig

log = logging.getLogger(__name__)

SUPPORT = "support"
ZERO_FILL = "zero_fill"
TIE_BREAK = "earlier-date"
HEAD_AGGREGATION = "elementwise mean over layers and heads"


@dataclass
class ImportanceTable:
    """Date -> importance at ``parcel``, ``crop`` or ``global`` scope.

    ``support[d]`` counts the parcels that contributed to ``entries[d]``.
    Parcel tables carry the parcel id in ``label``; crop tables the crop.
    """

    scope: str
    entries: dict
    support: dict
    label: str | None = None
    crop: str | None = None

    def dates(self) -> list:
        return sorted(self.entries)

    def total(self) -> float:
        return float(sum(self.entries.values()))


@dataclass
class KeyDateRanking:
    entries: list  # (date, importance), best first
    tie_break: str = TIE_BREAK

    @property
    def dates(self) -> list:
        return [d for d, _ in self.entries]

    def __len__(self):
        return len(self.entries)


def parcel_date_importance(record: AttentionRecord) -> ImportanceTable:
    """Column means of the valid attention block: how much each date is attended.

    Multi-layer or multi-head records are averaged element-wise first.
    """
    t = int(record.valid_length)
    if t < 1:
        raise EmptyRecord(f"parcel {record.parcel_id!r} has no valid observations")
    matrix = record.mean_matrix()
    importance = matrix.sum(axis=0) / t
    dates = record.dates if record.dates else tuple(range(t))
    if len(dates) != t:
        raise EmptyRecord(f"parcel {record.parcel_id!r}: {len(dates)} dates for {t} valid slots")
    entries = {d: float(v) for d, v in zip(dates, importance)}
    return ImportanceTable("parcel", entries, {d: 1 for d in dates}, record.parcel_id, record.crop)


def _mean_tables(tables: Sequence[ImportanceTable], scope, label, mode) -> ImportanceTable:
    sums: dict = {}
    counts: dict = {}
    for table in tables:
        for d, v in table.entries.items():
            sums[d] = sums.get(d, 0.0) + v
            counts[d] = counts.get(d, 0) + 1
    if mode == SUPPORT:
        entries = {d: sums[d] / counts[d] for d in sorted(sums)}
    elif mode == ZERO_FILL:
        entries = {d: sums[d] / len(tables) for d in sorted(sums)}
    else:
        raise ValueError(f"unknown averaging mode {mode!r}")
    return ImportanceTable(scope, entries, {d: counts[d] for d in sorted(counts)}, label, label if scope == "crop" else None)


def crop_date_importance(tables: Iterable[ImportanceTable], crop: str, mode: str = SUPPORT) -> ImportanceTable:
    """Average parcel importances over the parcels of one crop.

    ``mode="support"`` averages each date over the parcels that observed it;
    ``"zero_fill"`` divides by the crop's parcel count instead.
    """
    members = [t for t in tables if t.crop == crop]
    if not members:
        raise NoParcelsForCrop(f"no parcel tables for crop {crop!r}")
    return _mean_tables(members, "crop", crop, mode)


def global_date_importance(tables: Iterable[ImportanceTable], mode: str = SUPPORT) -> ImportanceTable:
    tables = list(tables)
    if not tables:
        raise EmptyInput("no parcel tables")
    return _mean_tables(tables, "global", None, mode)


def rank_key_dates(table: ImportanceTable, top_t: int | None = None) -> KeyDateRanking:
    """Dates by descending importance, earlier date first on ties."""
    if top_t is None:
        top_t = len(table.entries)
    if top_t > len(table.entries):
        raise TopTooLarge(f"top_t={top_t} exceeds {len(table.entries)} dates")
    if top_t < 0:
        raise TopTooLarge("top_t must be non-negative")
    ordered = sorted(table.entries.items(), key=lambda kv: (-kv[1], kv[0]))
    return KeyDateRanking(ordered[:top_t])


def build_keydate_dataset(dataset: Dataset, ranking: KeyDateRanking | Sequence, top_t: int) -> Dataset:
    """Keep only observations on the ``top_t`` best-ranked dates.

    Parcels left with no observation are dropped (splits are remapped).
    """
    dates = ranking.dates if isinstance(ranking, KeyDateRanking) else list(ranking)
    if top_t > len(dates):
        raise TopTooLarge(f"top_t={top_t} exceeds ranking length {len(dates)}")
    keep_dates = set(dates[:top_t])
    parcels, keep = [], []
    for p in dataset.parcels:
        idx = [i for i, d in enumerate(p.dates) if d in keep_dates]
        if idx:
            parcels.append(ParcelSeries(p.parcel_id, p.crop, tuple(p.dates[i] for i in idx), p.bands[idx]))
        keep.append(bool(idx))
    dropped = len(keep) - sum(keep)
    if not parcels:
        raise EmptyResult(f"no parcel observes any of the top-{top_t} dates")
    if dropped:
        log.info("top-%d dataset: dropped %d parcels without observations on key dates", top_t, dropped)
    keep = np.array(keep)
    new_index = np.cumsum(keep) - 1
    splits = {name: new_index[idx[keep[idx]]] for name, idx in dataset.splits.items()}
    return Dataset(parcels, list(dataset.class_vocabulary), splits)


# ---------------------------------------------------------------------------
# model-driven helpers


def attention_records(checkpoint: Checkpoint, dataset: Dataset, split: str | None = "test",
                      batch_size: int = 256) -> list:
    from .training import iter_forward

    parcels = dataset.split(split)
    records = []
    for out in iter_forward(checkpoint, parcels, batch_size):
        records.extend(out.records)
    return records


def parcel_tables(checkpoint: Checkpoint, dataset: Dataset, split: str | None = "test",
                  batch_size: int = 256) -> list:
    """Parcel-scope importance tables for every parcel of ``split``."""
    return [parcel_date_importance(r) for r in attention_records(checkpoint, dataset, split, batch_size)]


@dataclass
class AblationResult:
    reference: object            # Metrics of the full-data model
    curve: list                  # (t, Metrics)
    ranking: KeyDateRanking
    reference_checkpoint: Checkpoint | None = None
    notes: dict = field(default_factory=dict)


def ablation_study(dataset: Dataset, model_config: ModelConfig, train_config, t_values: Sequence[int],
                   reference: Checkpoint | None = None, ranking: KeyDateRanking | None = None,
                   split: str = "test", mode: str = SUPPORT) -> AblationResult:
    """Retrain on the top-t key dates for each ``t`` and evaluate on ``split``.

    Without ``reference`` a full-data model is trained first; without
    ``ranking`` the key dates come from that model's attention on ``split``.
    """
    from .training import evaluate, train

    if reference is None:
        reference = train(dataset, model_config, train_config).checkpoint
    if ranking is None:
        ranking = rank_key_dates(global_date_importance(parcel_tables(reference, dataset, split), mode))
    ref_metrics = evaluate(reference, dataset, split)
    curve = []
    for t in t_values:
        reduced = build_keydate_dataset(dataset, ranking, min(t, len(ranking)))
        model = train(reduced, model_config, train_config).checkpoint
        curve.append((t, evaluate(model, reduced, split)))
    return AblationResult(ref_metrics, curve, ranking, reference,
                          {"averaging": mode, "head_aggregation": HEAD_AGGREGATION})


# ---------------------------------------------------------------------------
# spectral views


def pca_project(vectors, components: int = 2):
    """Project mean-centred vectors on the leading covariance eigenvectors.

    Each eigenvector is signed so its largest-magnitude entry is positive.
    Returns ``(coordinates [n, components], explained_variance [components],
    axes [dim, components])``.
    """
    x = np.asarray(vectors, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DegenerateInput("need at least two vectors")
    if not 1 <= components <= x.shape[1]:
        raise DegenerateInput(f"components must be in 1..{x.shape[1]}")
    centered = x - x.mean(axis=0)
    if not np.any(centered):
        raise DegenerateInput("all vectors are identical")
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigval, eigvec = np.linalg.eigh(cov)
    order = np.argsort(eigval)[::-1][:components]
    axes = eigvec[:, order]
    pivots = np.argmax(np.abs(axes), axis=0)
    axes = axes * np.sign(axes[pivots, np.arange(components)])
    explained = np.clip(eigval[order], 0.0, None)
    return centered @ axes, explained, axes


def _observations_on(parcels: Iterable[ParcelSeries], date: dt.date):
    for p in parcels:
        try:
            i = p.dates.index(date)
        except ValueError:
            continue
        yield p, p.bands[i]


def pca_on_date(dataset: Dataset, date: dt.date, split: str | None = "test", components: int = 2):
    """PCA of the raw reflectances observed on one date: ``(parcel_ids, crops, coords, explained)``."""
    rows = list(_observations_on(dataset.split(split), date))
    if not rows:
        raise DateAbsent(f"no parcel observed {date}")
    coords, explained, _ = pca_project([b for _, b in rows], components)
    return [p.parcel_id for p, _ in rows], [p.crop for p, _ in rows], coords, explained


@dataclass
class NdviSummaryRow:
    crop: str
    mean_ndvi: float
    std_ndvi: float
    importance: float | None
    support: int


def ndvi_attention_summary(dataset: Dataset, crop_tables: Iterable[ImportanceTable], date: dt.date,
                           split: str | None = "test", nir_index: int = NIR_INDEX,
                           red_index: int = RED_INDEX) -> list:
    """Per crop: mean/std NDVI of parcels observing ``date`` and the crop's importance there.

    Crops without an observation on ``date`` are left out (logged).
    """
    parcels = dataset.split(split)
    if date not in {d for p in parcels for d in p.dates}:
        raise DateAbsent(f"{date} is not on the date axis")
    by_crop = {t.label: t for t in crop_tables}
    rows = []
    for crop in dataset.class_vocabulary:
        values = [ndvi(b[nir_index], b[red_index])
                  for p, b in _observations_on((p for p in parcels if p.crop == crop), date)]
        if not values:
            log.info("crop %s has no observation on %s; omitted", crop, date)
            continue
        table = by_crop.get(crop)
        rows.append(NdviSummaryRow(crop, float(np.mean(values)), float(np.std(values)),
                                   table.entries.get(date) if table else None, len(values)))
    return rows


def ndvi_over_time(dataset: Dataset, crop: str, split: str | None = None, nir_index: int = NIR_INDEX,
                   red_index: int = RED_INDEX) -> list:
    """``(date, mean NDVI)`` per observed date over the parcels of ``crop``."""
    parcels = [p for p in dataset.split(split) if p.crop == crop]
    if not parcels:
        raise NoParcelsForCrop(f"no parcels of crop {crop!r}")
    sums: dict = {}
    counts: dict = {}
    for p in parcels:
        for d, v in zip(p.dates, p.ndvi(nir_index, red_index)):
            sums[d] = sums.get(d, 0.0) + v
            counts[d] = counts.get(d, 0) + 1
    return [(d, sums[d] / counts[d]) for d in sorted(sums)]


def top_attended_parcels(tables: Iterable[ImportanceTable], date: dt.date, k: int) -> list:
    """Ids of the ``k`` parcels giving ``date`` the most importance (ties by id)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scored = [(t.entries[date], t.label) for t in tables if date in t.entries]
    if not scored:
        raise DateAbsent(f"no parcel table contains {date}")
    scored.sort(key=lambda s: (-s[0], s[1]))
    return [pid for _, pid in scored[:k]]
