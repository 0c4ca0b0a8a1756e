"""Artifact writing: CSV tables, JSON documents and run manifests."""
from __future__ import annotations

import csv
import datetime as dt
import hashlib
import json
import platform
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__


def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, (dt.date, Path)):
        return str(value) if isinstance(value, Path) else value.isoformat()
    return value


def _cell(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, dt.date):
        return value.isoformat()
    if value is None:
        return ""
    return value


def write_json(path, doc) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_plain(doc), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def fingerprint(path) -> str:
    """sha256 of a file, or of every file in a directory (sorted by name)."""
    path = Path(path)
    h = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file() and not p.name.startswith("manifest")) \
        if path.is_dir() else [path]
    for f in files:
        h.update(f.name.encode() + b"\0")
        h.update(f.read_bytes())
    return h.hexdigest()


def next_manifest_path(out_dir, subcommand: str) -> Path:
    """Manifests are never overwritten: repeated runs get a numeric suffix."""
    out_dir = Path(out_dir)
    path = out_dir / f"manifest-{subcommand}.json"
    n = 2
    while path.exists():
        path = out_dir / f"manifest-{subcommand}-{n}.json"
        n += 1
    return path


def write_manifest(out_dir, subcommand: str, *, config: dict, seeds: dict, inputs: Sequence,
                   outputs: Sequence, started: float, finished: float, extra: dict | None = None) -> Path:
    doc = {
        "subcommand": subcommand,
        "config": config,
        "seeds": seeds,
        "inputs": {str(p): fingerprint(p) for p in inputs},
        "outputs": sorted(str(p) for p in outputs),
        "timings": {"started": dt.datetime.fromtimestamp(started, dt.timezone.utc).isoformat(),
                    "wall_seconds": round(finished - started, 3)},
        "software": {"cropattn": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    if extra:
        doc.update(extra)
    return write_json(next_manifest_path(out_dir, subcommand), doc)


# figure index used by `report`
FIGURE_TABLES = {
    "importance_crop.csv": "date importance per crop (attention temporal patterns)",
    "importance_global.csv": "global date importance used to rank key dates",
    "key_dates.csv": "ranked key dates",
    "ndvi_summary.csv": "per-crop NDVI and importance on each key date",
    "ndvi_over_time.csv": "average NDVI over time per crop",
    "top_parcels.csv": "highest attended parcels on each key date",
    "ablation.csv": "class accuracy against number of key dates",
    "occlusion_deltas.csv": "change of date importance after crop occlusion",
    "accuracy_change.csv": "per-crop accuracy change after occlusion",
    "total_variation.csv": "attention-shift magnitude per crop and occlusion",
    "confusion_matrix.csv": "confusion matrix of the trained model",
}


def build_report(out_dir) -> dict:
    """Index every manifest and figure table found under ``out_dir``."""
    out_dir = Path(out_dir)
    manifests = []
    for path in sorted(out_dir.rglob("manifest-*.json")):
        doc = json.loads(path.read_text(encoding="utf-8"))
        manifests.append({"path": str(path.relative_to(out_dir)), "subcommand": doc.get("subcommand"),
                          "outputs": len(doc.get("outputs", []))})
    tables = []
    for path in sorted(out_dir.rglob("*.csv")):
        if path.name in FIGURE_TABLES or path.name.startswith("pca_"):
            desc = FIGURE_TABLES.get(path.name, "PCA of raw reflectances on a key date")
            with open(path, encoding="utf-8") as fh:
                rows = sum(1 for _ in fh) - 1
            tables.append({"path": str(path.relative_to(out_dir)), "description": desc, "rows": rows})
    metrics = {}
    for path in sorted(out_dir.rglob("metrics*.json")):
        doc = json.loads(path.read_text(encoding="utf-8"))
        metrics[str(path.relative_to(out_dir))] = {k: doc[k] for k in ("overall_accuracy", "class_accuracy", "macro_f1") if k in doc}
    return {"manifests": manifests, "tables": tables, "metrics": metrics}
