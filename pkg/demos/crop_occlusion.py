"""Walkthrough: how attention shifts when a crop is removed.

Crop A differs from B only early in summer (W1) and from C only later (W2).
With all three crops present, A's parcels need one of the two windows to be
told apart from both neighbours.  Occluding a crop and retraining removes the
reason to look at its window, so A's mass there drops.  Which window a given
seed settles on varies.

    python3 demos/crop_occlusion.py
"""
from pathlib import Path

from cropattn.cli import read_run_config
from cropattn.dataset import generate_synthetic, load_synthetic_config
from cropattn.explain import parcel_tables
from cropattn.model import ModelConfig
from cropattn.sensitivity import importance_mass, occlusion_study
from cropattn.training import TrainConfig, evaluate, train

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"

synth = load_synthetic_config(FIXTURES / "three_class.cfg")
windows = {c.name: tuple(int(x) for x in c.windows[0][:2]) for c in synth.crops if c.windows}
dataset = generate_synthetic(synth)
print(f"{len(dataset)} parcels; W1 = days {windows['B']}, W2 = days {windows['C']}")

model_kw, train_kw = read_run_config(FIXTURES / "train_small.cfg")
model_config, train_config = ModelConfig(**model_kw), TrainConfig(**train_kw)
reference = train(dataset, model_config, train_config).checkpoint
print(f"full model class accuracy {evaluate(reference, dataset).class_accuracy:.3f}")
full_tables = parcel_tables(reference, dataset)

for crop in ("B", "C"):
    result, = occlusion_study(dataset, model_config, train_config, [crop], reference)
    print(f"\noccluding {crop}:")
    print(f"  class accuracy after retraining {result.metrics.class_accuracy:.3f}")
    for other, change in result.accuracy_change.changes.items():
        print(f"  recall change of {other}: {change:+.3f}")
    for name, (lo, hi) in (("W1", windows["B"]), ("W2", windows["C"])):
        before = importance_mass(full_tables, "A", lo, hi)
        after = importance_mass(result.tables, "A", lo, hi)
        print(f"  A's importance mass in {name}: {before:.3f} -> {after:.3f}")
    tv = result.delta.total_variation()
    print("  total variation of date-importance deltas: "
          + ", ".join(f"{c} {v:.3f}" for c, v in tv.items()))
