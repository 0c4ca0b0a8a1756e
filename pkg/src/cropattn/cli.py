"""Command-line pipeline: synth, ingest, train, explain, ablate, occlude, report.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

from . import dataset as ds
from . import explain as ex
from . import report as rp
from .errors import CropAttnError, InvalidConfig
from .model import Checkpoint, ModelConfig, load_checkpoint, save_checkpoint
from .sensitivity import occlusion_study
from .training import TrainConfig, evaluate, train

log = logging.getLogger("cropattn")

MODEL_FLAGS = {
    "num_layers": ("--layers", int),
    "num_heads": ("--heads", int),
    "model_dim": ("--dim", int),
    "feed_forward_dim": ("--ff-dim", int),
    "dropout": ("--dropout", float),
}
TRAIN_FLAGS = {
    "beta1": ("--beta1", float),
    "beta2": ("--beta2", float),
    "epsilon": ("--epsilon", float),
    "base_learning_rate": ("--learning-rate", float),
    "weight_decay": ("--weight-decay", float),
    "focal_gamma": ("--focal-gamma", float),
    "max_epochs": ("--max-epochs", int),
    "early_stop_check_every": ("--early-stop-every", int),
    "early_stop_patience": ("--early-stop-patience", int),
    "warmup_steps": ("--warmup-steps", int),
    "batch_size": ("--batch-size", int),
}


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value configuration file")
    common.add_argument("--seed", type=int, help="random seed (overrides the config file)")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker threads for independent retrainings")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cropattn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset from a config file")

    p = sub.add_parser("ingest", parents=[common], help="import a long-format CSV")
    p.add_argument("csv", type=Path)
    p.add_argument("--divisor", type=float, default=10000.0, help="reflectance scale divisor")
    p.add_argument("--split", default="0.7,0.15,0.15", help="train,validation,test fractions")
    p.add_argument("--split-file", type=Path, help="explicit split definitions (name = id,id,...)")
    p.add_argument("--schema", type=Path, help="key=value column mapping (parcel_id, date, crop, bands)")

    def model_train_flags(p):
        for name, (flag, typ) in {**MODEL_FLAGS, **TRAIN_FLAGS}.items():
            p.add_argument(flag, dest=name, type=typ, default=None)

    p = sub.add_parser("train", parents=[common], help="train a model and report test metrics")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    model_train_flags(p)

    p = sub.add_parser("explain", parents=[common], help="attention importances, key dates, PCA, NDVI")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--top-t", type=int, default=3)
    p.add_argument("--top-k", type=int, default=4, help="parcels listed per key date")
    p.add_argument("--mode", choices=[ex.SUPPORT, ex.ZERO_FILL], default=ex.SUPPORT)
    p.add_argument("--nir-band", type=int, default=ds.NIR_INDEX)
    p.add_argument("--red-band", type=int, default=ds.RED_INDEX)

    p = sub.add_parser("ablate", parents=[common], help="retrain on the top-t key dates")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True, help="reference model")
    p.add_argument("--ranking", type=Path, help="key_dates.csv from explain (default: recompute)")
    p.add_argument("--t", type=_int_list, required=True, help="comma-separated numbers of key dates")
    p.add_argument("--split", default="test")

    p = sub.add_parser("occlude", parents=[common], help="crop occlusion sensitivity")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True, help="reference model")
    p.add_argument("--crops", default="", help="comma-separated crops; empty retrains on the full set")
    p.add_argument("--split", default="test")
    p.add_argument("--mode", choices=[ex.SUPPORT, ex.ZERO_FILL], default=ex.SUPPORT)

    sub.add_parser("report", parents=[common], help="index the artifacts of an output directory")
    return parser


# ---------------------------------------------------------------------------
# config resolution


def _coerce(cls, values: dict):
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    out = {}
    for key, value in values.items():
        if key not in types:
            raise InvalidConfig(f"unknown {cls.__name__} key {key!r}")
        kind = str(types[key])
        if "bool" in kind:
            if value.strip().lower() not in ("true", "false", "1", "0"):
                raise InvalidConfig(f"{key} expects true or false, got {value!r}")
            out[key] = value.strip().lower() in ("true", "1")
            continue
        out[key] = int(value) if "int" in kind and "float" not in kind else float(value)
    return out


def read_run_config(path) -> tuple[dict, dict]:
    """Model and training overrides from a file of ``model.*`` / ``train.*`` keys."""
    model_kw, train_kw = {}, {}
    for key, value in ds.read_keyvalue(path).items():
        section, _, name = key.partition(".")
        if section == "model":
            model_kw.update(_coerce(ModelConfig, {name: value}))
        elif section == "train":
            train_kw.update(_coerce(TrainConfig, {name: value}))
        else:
            raise InvalidConfig(f"config key {key!r} must start with model. or train.")
    return model_kw, train_kw


def resolve_configs(args) -> tuple[ModelConfig, TrainConfig]:
    """Defaults < ``--config`` file < flags."""
    model_kw, train_kw = read_run_config(args.config) if args.config is not None else ({}, {})
    for name in MODEL_FLAGS:
        if getattr(args, name, None) is not None:
            model_kw[name] = getattr(args, name)
    for name in TRAIN_FLAGS:
        if getattr(args, name, None) is not None:
            train_kw[name] = getattr(args, name)
    if args.seed is not None:
        train_kw["seed"] = args.seed
    return ModelConfig(**model_kw), TrainConfig(**train_kw)


def _checkpoint_configs(checkpoint: Checkpoint, seed: int | None):
    train_kw = dict(checkpoint.metadata.get("train_config", {}))
    if seed is not None:
        train_kw["seed"] = seed
    return checkpoint.config, TrainConfig(**train_kw)


def _read_dataset(path: Path) -> ds.Dataset:
    if not path.exists():
        raise FileNotFoundError(f"dataset {path} does not exist")
    return ds.read_dataset(path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    if args.config is None:
        raise UsageError("synth requires --config")
    if not args.config.exists():
        raise UsageError(f"config file {args.config} does not exist")
    config = ds.load_synthetic_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    dataset = ds.generate_synthetic(config)
    outputs = ds.save_dataset(dataset, args.out)
    return outputs, {"config": dataclasses.asdict(config), "seeds": {"synthetic": config.seed},
                     "inputs": [args.config], "extra": {"dataset_fingerprint": dataset.fingerprint()}}


def _read_schema(path) -> ds.CsvSchema:
    values = ds.read_keyvalue(path)
    kw = {k: v.strip() for k, v in values.items() if k in ("parcel_id", "date", "crop")}
    if "bands" in values:
        kw["bands"] = tuple(b.strip() for b in values["bands"].split(","))
    return ds.CsvSchema(**kw)


def cmd_ingest(args):
    if not args.csv.exists():
        raise FileNotFoundError(f"{args.csv} does not exist")
    schema = _read_schema(args.schema) if args.schema else None
    fractions = tuple(float(x) for x in args.split.split(","))
    seed = 0 if args.seed is None else args.seed
    dataset = ds.load_dataset(args.csv, schema, args.divisor, fractions, seed, args.split_file)
    outputs = ds.save_dataset(dataset, args.out)
    inputs = [args.csv] + [p for p in (args.schema, args.split_file) if p]
    return outputs, {"config": {"divisor": args.divisor, "split": fractions, "schema": dataclasses.asdict(schema or ds.CsvSchema())},
                     "seeds": {"split": seed}, "inputs": inputs,
                     "extra": {"parcels": len(dataset), "class_vocabulary": dataset.class_vocabulary,
                               "dataset_fingerprint": dataset.fingerprint()}}


def _write_metrics(out: Path, metrics, stem="metrics") -> list[Path]:
    paths = [rp.write_json(out / f"{stem}.json", metrics.to_dict())]
    vocab = metrics.class_vocabulary
    cm_name = "confusion_matrix.csv" if stem == "metrics" else f"confusion_matrix_{stem[len('metrics_'):]}.csv"
    paths.append(rp.write_csv(out / cm_name, ["true_crop", *vocab],
                              [[c, *row] for c, row in zip(vocab, metrics.confusion_matrix.tolist())]))
    return paths


def cmd_train(args):
    dataset = _read_dataset(args.data)
    model_config, train_config = resolve_configs(args)
    result = train(dataset, model_config, train_config)
    ckpt_path = save_checkpoint(result.checkpoint, args.out / "checkpoint.json")
    metrics = evaluate(result.checkpoint, dataset, "test")
    outputs = [ckpt_path, *_write_metrics(args.out, metrics)]
    config = {"model": dataclasses.asdict(result.checkpoint.config), "train": dataclasses.asdict(train_config),
              "weight_decay_mode": "decoupled", "epoch_unit": "full pass over the train split"}
    return outputs, {"config": config, "seeds": {"train": train_config.seed}, "inputs": [args.data],
                     "extra": {"epochs": result.log, "best_epoch": result.best_epoch,
                               "stopped_epoch": result.stopped_epoch,
                               "dataset_fingerprint": dataset.fingerprint()}}


def cmd_explain(args):
    dataset = _read_dataset(args.data)
    checkpoint = load_checkpoint(args.checkpoint)
    out = args.out
    tables = ex.parcel_tables(checkpoint, dataset, args.split)
    crops = [c for c in checkpoint.class_vocabulary if any(t.crop == c for t in tables)]
    crop_tables = [ex.crop_date_importance(tables, c, args.mode) for c in crops]
    global_table = ex.global_date_importance(tables, args.mode)
    ranking = ex.rank_key_dates(global_table)
    top_t = min(args.top_t, len(ranking))
    outputs = [
        rp.write_csv(out / "importance_parcel.csv", ["parcel_id", "crop", "date", "importance"],
                     [[t.label, t.crop, d, v] for t in tables for d, v in t.entries.items()]),
        rp.write_csv(out / "importance_crop.csv", ["crop", "date", "importance", "support"],
                     [[t.label, d, v, t.support[d]] for t in crop_tables for d, v in t.entries.items()]),
        rp.write_csv(out / "importance_global.csv", ["date", "importance", "support"],
                     [[d, v, global_table.support[d]] for d, v in global_table.entries.items()]),
        rp.write_csv(out / "key_dates.csv", ["rank", "date", "importance"],
                     [[i + 1, d, v] for i, (d, v) in enumerate(ranking.entries[:top_t])]),
    ]
    ndvi_rows, top_rows = [], []
    pca_meta = {}
    for date in ranking.dates[:top_t]:
        for row in ex.ndvi_attention_summary(dataset, crop_tables, date, args.split, args.nir_band, args.red_band):
            ndvi_rows.append([date, row.crop, row.mean_ndvi, row.std_ndvi, row.importance, row.support])
        for rank, pid in enumerate(ex.top_attended_parcels(tables, date, args.top_k), start=1):
            top_rows.append([date, rank, pid, next(t for t in tables if t.label == pid).entries[date]])
        try:
            ids, pcrops, coords, explained = ex.pca_on_date(dataset, date, args.split)
        except CropAttnError as exc:
            log.warning("PCA skipped for %s: %s", date, exc)
            continue
        imp = {t.label: t.entries.get(date) for t in tables}
        outputs.append(rp.write_csv(out / f"pca_{date.isoformat()}.csv", ["parcel_id", "crop", "pc1", "pc2", "importance"],
                                    [[pid, c, *xy, imp.get(pid)] for pid, c, xy in zip(ids, pcrops, coords.tolist())]))
        pca_meta[date.isoformat()] = explained.tolist()
    outputs.append(rp.write_csv(out / "ndvi_summary.csv",
                                ["date", "crop", "mean_ndvi", "std_ndvi", "importance", "support"], ndvi_rows))
    outputs.append(rp.write_csv(out / "top_parcels.csv", ["date", "rank", "parcel_id", "importance"], top_rows))
    over_time = []
    for crop in crops:
        over_time.extend([crop, d, v] for d, v in ex.ndvi_over_time(dataset, crop, args.split, args.nir_band, args.red_band))
    outputs.append(rp.write_csv(out / "ndvi_over_time.csv", ["crop", "date", "mean_ndvi"], over_time))
    meta = {"averaging": args.mode, "head_aggregation": ex.HEAD_AGGREGATION, "tie_break": ranking.tie_break,
            "split": args.split, "parcels": len(tables), "top_t": top_t,
            "band_indices": {"nir": args.nir_band, "red": args.red_band},
            "pca_explained_variance": pca_meta,
            "global_support": {d.isoformat(): n for d, n in global_table.support.items()}}
    outputs.append(rp.write_json(out / "explain_meta.json", meta))
    return outputs, {"config": {k: getattr(args, k) for k in ("split", "top_t", "top_k", "mode", "nir_band", "red_band")},
                     "seeds": {}, "inputs": [args.data, args.checkpoint], "extra": {}}


def _read_ranking(path) -> ex.KeyDateRanking:
    import datetime as dt

    rows = rp.read_csv(path)
    return ex.KeyDateRanking([(dt.date.fromisoformat(r["date"]), float(r["importance"])) for r in rows])


def cmd_ablate(args):
    dataset = _read_dataset(args.data)
    reference = load_checkpoint(args.checkpoint)
    model_config, train_config = _checkpoint_configs(reference, args.seed)
    t_values = list(dict.fromkeys(args.t))
    if len(t_values) != len(args.t):
        log.warning("duplicate t values removed: %s", ",".join(map(str, t_values)))
    ranking = _read_ranking(args.ranking) if args.ranking else None
    if ranking is None:
        ranking = ex.rank_key_dates(ex.global_date_importance(ex.parcel_tables(reference, dataset, args.split)))
    too_large = [t for t in t_values if t > len(ranking) or t < 1]
    if too_large:
        raise UsageError(f"t values {too_large} outside 1..{len(ranking)} (ranking length)")
    result = ex.ablation_study(dataset, model_config, train_config, t_values, reference, ranking, args.split)
    rows = [["reference", result.reference.overall_accuracy, result.reference.class_accuracy, result.reference.macro_f1]]
    rows += [[t, m.overall_accuracy, m.class_accuracy, m.macro_f1] for t, m in result.curve]
    outputs = [rp.write_csv(args.out / "ablation.csv", ["t", "overall_accuracy", "class_accuracy", "macro_f1"], rows)]
    inputs = [args.data, args.checkpoint] + ([args.ranking] if args.ranking else [])
    return outputs, {"config": {"t": t_values, "split": args.split, "train": dataclasses.asdict(train_config)},
                     "seeds": {"train": train_config.seed}, "inputs": inputs, "extra": {}}


def cmd_occlude(args):
    dataset = _read_dataset(args.data)
    reference = load_checkpoint(args.checkpoint)
    model_config, train_config = _checkpoint_configs(reference, args.seed)
    crops = [c.strip() for c in args.crops.split(",") if c.strip()] or [None]
    results, errors = [], {}
    for crop in crops:
        try:
            results.extend(occlusion_study(dataset, model_config, train_config, [crop], reference,
                                           args.split, args.mode))
        except CropAttnError as exc:
            print(f"cropattn occlude: {crop}: {type(exc).__name__}: {exc}", file=sys.stderr)
            errors[crop] = f"{type(exc).__name__}: {exc}"
    out = args.out
    label = lambda c: "" if c is None else c  # noqa: E731
    outputs = [
        rp.write_csv(out / "occlusion_deltas.csv", ["occluded_crop", "crop", "date", "delta", "support"],
                     [[label(r.occluded_crop), c, d, v, r.delta.support[(c, d)]]
                      for r in results for (c, d), v in r.delta.entries.items()]),
        rp.write_csv(out / "accuracy_change.csv", ["occluded_crop", "crop", "accuracy_change"],
                     [[label(r.occluded_crop), c, v] for r in results for c, v in r.accuracy_change.changes.items()]),
        rp.write_csv(out / "total_variation.csv", ["occluded_crop", "crop", "total_variation"],
                     [[label(r.occluded_crop), c, v] for r in results for c, v in r.delta.total_variation().items()]),
    ]
    for r in results:
        outputs += _write_metrics(out, r.metrics, f"metrics_occluded_{label(r.occluded_crop) or 'none'}")
    extra = {"errors": errors, "reference_fingerprint": rp.fingerprint(args.checkpoint)}
    if errors and not results:
        rp.write_manifest(out, "occlude", config={"crops": crops}, seeds={"train": train_config.seed},
                          inputs=[args.data, args.checkpoint], outputs=outputs, started=args._started,
                          finished=time.time(), extra=extra)
        raise RuntimeError(f"all {len(errors)} occlusions failed")
    return outputs, {"config": {"crops": crops, "split": args.split, "mode": args.mode,
                                "train": dataclasses.asdict(train_config)},
                     "seeds": {"train": train_config.seed}, "inputs": [args.data, args.checkpoint],
                     "extra": extra, "exit": 1 if errors else 0}


def cmd_report(args):
    doc = rp.build_report(args.out)
    return [rp.write_json(args.out / "report.json", doc)], {"config": {}, "seeds": {}, "inputs": [], "extra": {}}


COMMANDS = {"synth": cmd_synth, "ingest": cmd_ingest, "train": cmd_train, "explain": cmd_explain,
            "ablate": cmd_ablate, "occlude": cmd_occlude, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args._started = time.time()
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        outputs, info = COMMANDS[args.command](args)
        rp.write_manifest(args.out, args.command, config=info["config"], seeds=info["seeds"],
                          inputs=info["inputs"], outputs=outputs, started=args._started,
                          finished=time.time(), extra=info.get("extra"))
        return info.get("exit", 0)
    except UsageError as exc:
        parser.error(str(exc))
    except (CropAttnError, OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"cropattn {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
