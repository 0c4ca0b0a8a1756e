"""Crop occlusion: retrain without one crop and measure how date importances shift."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .dataset import Dataset
from .errors import ParcelMismatch, TooFewClasses, UnknownCrop
from .explain import SUPPORT, ZERO_FILL, ImportanceTable, parcel_tables
from .model import Checkpoint, ModelConfig

log = logging.getLogger(__name__)


@dataclass
class OcclusionDelta:
    """``entries[(crop, date)]`` = mean change in parcel importance after occlusion."""

    occluded_crop: str | None
    entries: dict
    support: dict

    def crops(self) -> list:
        return sorted({c for c, _ in self.entries}, key=self._crop_order)

    def _crop_order(self, crop):
        return next(i for i, (c, _) in enumerate(self.entries) if c == crop)

    def for_crop(self, crop: str) -> dict:
        return {d: v for (c, d), v in self.entries.items() if c == crop}

    def total_variation(self) -> dict:
        """Half the L1 norm of each crop's delta curve."""
        out: dict = {}
        for (c, _), v in self.entries.items():
            out[c] = out.get(c, 0.0) + 0.5 * abs(v)
        return out


@dataclass
class AccuracyChange:
    occluded_crop: str | None
    changes: dict  # crop -> recall after - recall before


@dataclass
class OcclusionResult:
    occluded_crop: str | None
    delta: OcclusionDelta
    accuracy_change: AccuracyChange
    metrics: object
    checkpoint: Checkpoint
    tables: list = field(default_factory=list)


def occlude_crop(dataset: Dataset, crop: str) -> Dataset:
    """Copy of ``dataset`` without any parcel of ``crop`` (vocabulary shrinks)."""
    if crop not in dataset.class_vocabulary:
        raise UnknownCrop(f"crop {crop!r} not in the dataset")
    remaining = [c for c in dataset.class_vocabulary if c != crop]
    if len(remaining) < 2:
        raise TooFewClasses(f"occluding {crop!r} would leave {len(remaining)} class(es)")
    keep = [p.crop != crop for p in dataset.parcels]
    return dataset.subset(keep, remaining)


def occlusion_delta(full_tables: Iterable[ImportanceTable], occluded_tables: Iterable[ImportanceTable],
                    crops: Sequence[str] | None = None, occluded_crop: str | None = None,
                    mode: str = SUPPORT) -> OcclusionDelta:
    """Per crop and date, the mean over the crop's parcels of (occluded - full) importance.

    Both table sets must cover the same parcels.  ``mode`` follows the crop
    averaging convention: ``support`` divides by the parcels observing the
    date, ``zero_fill`` by all parcels of the crop.
    """
    full = {t.label: t for t in full_tables}
    occluded = {t.label: t for t in occluded_tables}
    if crops is not None:
        wanted = set(crops)
        full = {k: t for k, t in full.items() if t.crop in wanted}
        occluded = {k: t for k, t in occluded.items() if t.crop in wanted}
    if set(full) != set(occluded):
        missing = sorted(set(full) ^ set(occluded))
        raise ParcelMismatch(f"table sets differ on {len(missing)} parcels, e.g. {missing[:3]}")
    order = list(crops) if crops is not None else list(dict.fromkeys(t.crop for t in full.values()))
    sums: dict = {}
    counts: dict = {}
    parcels_per_crop: dict = {}
    for pid in sorted(full):
        before, after = full[pid], occluded[pid]
        if before.crop != after.crop or set(before.entries) != set(after.entries):
            raise ParcelMismatch(f"parcel {pid!r} differs between the two table sets")
        parcels_per_crop[before.crop] = parcels_per_crop.get(before.crop, 0) + 1
        for d, v in before.entries.items():
            key = (before.crop, d)
            sums[key] = sums.get(key, 0.0) + after.entries[d] - v
            counts[key] = counts.get(key, 0) + 1
    entries, support = {}, {}
    for crop in order:
        for key in sorted(k for k in sums if k[0] == crop):
            if mode == SUPPORT:
                entries[key] = sums[key] / counts[key]
            elif mode == ZERO_FILL:
                entries[key] = sums[key] / parcels_per_crop[crop]
            else:
                raise ValueError(f"unknown averaging mode {mode!r}")
            support[key] = counts[key]
    return OcclusionDelta(occluded_crop, entries, support)


def accuracy_change(before, after, occluded_crop: str | None = None) -> AccuracyChange:
    """Per-class recall differences on the classes both models were scored on."""
    rb, ra = before.per_class_recall, after.per_class_recall
    shared = [c for c in after.class_vocabulary if c in rb and c in ra]
    return AccuracyChange(occluded_crop, {c: ra[c] - rb[c] for c in shared})


def occlusion_study(dataset: Dataset, model_config: ModelConfig, train_config,
                    crops_to_occlude: Sequence[str | None], reference: Checkpoint | None = None,
                    split: str = "test", mode: str = SUPPORT, threads: int = 1) -> list:
    """Occlude each crop in turn, retrain with the reference settings, and compare.

    ``None`` in ``crops_to_occlude`` retrains on the unchanged dataset, which
    must reproduce the reference exactly (all-zero deltas).
    """
    from .training import evaluate, train

    if reference is None:
        reference = train(dataset, model_config, train_config).checkpoint
    ref_metrics = evaluate(reference, dataset, split)
    ref_tables = parcel_tables(reference, dataset, split)

    def one(crop):
        reduced = dataset if crop is None else occlude_crop(dataset, crop)
        model = train(reduced, model_config, train_config).checkpoint
        tables = parcel_tables(model, reduced, split)
        remaining = list(reduced.class_vocabulary)
        shared_ids = {t.label for t in tables}
        delta = occlusion_delta([t for t in ref_tables if t.label in shared_ids], tables, remaining, crop, mode)
        metrics = evaluate(model, reduced, split)
        return OcclusionResult(crop, delta, accuracy_change(ref_metrics, metrics, crop), metrics, model, tables)

    crops = list(crops_to_occlude)
    if threads > 1 and len(crops) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, crops))
    return [one(c) for c in crops]


def importance_mass(tables: Iterable[ImportanceTable], crop: str, first_day: int, last_day: int) -> float:
    """Mean over ``crop``'s parcels of the importance falling on days ``first_day..last_day``."""
    masses = [sum(v for d, v in t.entries.items() if first_day <= d.timetuple().tm_yday <= last_day)
              for t in tables if t.crop == crop]
    return float(np.mean(masses)) if masses else 0.0
