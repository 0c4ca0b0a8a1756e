"""Walkthrough: find the dates a trained model relies on.

Two synthetic crops share one phenology except for a short window where
crop B is harvested early.  We train the encoder, turn its attention into
date importances, rank key dates and check how much accuracy survives when
the model is retrained on the top few dates only.

    python3 demos/key_dates.py
"""
from pathlib import Path

from cropattn.cli import read_run_config
from cropattn.dataset import generate_synthetic, load_synthetic_config
from cropattn.explain import (
    ablation_study,
    crop_date_importance,
    global_date_importance,
    ndvi_attention_summary,
    parcel_tables,
    rank_key_dates,
)
from cropattn.model import ModelConfig
from cropattn.training import TrainConfig, evaluate, train

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"

synth = load_synthetic_config(FIXTURES / "two_class.cfg")
(lo, hi, shift), = next(c for c in synth.crops if c.name == "B").windows
dataset = generate_synthetic(synth)
print(f"{len(dataset)} parcels, crops {dataset.class_vocabulary}")
print(f"crop B shifts NDVI by {shift:+.1f} on days {lo:.0f}-{hi:.0f}")

model_kw, train_kw = read_run_config(FIXTURES / "train_small.cfg")
model_config, train_config = ModelConfig(**model_kw), TrainConfig(**train_kw)
result = train(dataset, model_config, train_config)
metrics = evaluate(result.checkpoint, dataset, "test")
print(f"\ntrained {result.stopped_epoch} epochs (best at {result.best_epoch})")
print(f"test accuracy {metrics.overall_accuracy:.3f}, class accuracy {metrics.class_accuracy:.3f}")

# parcel importances are column means of the attention matrix; crop and
# global scopes average them over the parcels observing each date
tables = parcel_tables(result.checkpoint, dataset, "test")
ranking = rank_key_dates(global_date_importance(tables))
print("\ntop key dates:")
for date, value in ranking.entries[:5]:
    day = date.timetuple().tm_yday
    flag = "inside" if lo <= day <= hi else "outside"
    print(f"  {date}  day {day:3d}  importance {value:.3f}  ({flag} the window)")

crop_tables = [crop_date_importance(tables, c) for c in dataset.class_vocabulary]
key = ranking.dates[0]
print(f"\nNDVI on {key}:")
for row in ndvi_attention_summary(dataset, crop_tables, key):
    print(f"  {row.crop}: mean {row.mean_ndvi:.2f} +/- {row.std_ndvi:.2f}, crop importance {row.importance:.3f}")

ablation = ablation_study(dataset, model_config, train_config, [1, 3, 5], result.checkpoint, ranking)
print(f"\nretrained on key dates only (reference {ablation.reference.class_accuracy:.3f}):")
for t, m in ablation.curve:
    print(f"  t={t}: class accuracy {m.class_accuracy:.3f}")

