"""Acceptance suite: eleven pass/fail criteria at their stated tolerances.

``pytest tests/test_acceptance.py -v`` prints one verdict line per criterion
in the terminal summary; ``python3 tests/test_acceptance.py`` prints the same
lines without pytest.
"""
import dataclasses
import math
import sys
import time
from functools import lru_cache
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent))

from conftest import FIXTURES  # noqa: E402
from oracles import max_relative_error, numeric_grads, oracle_pca, random_params, random_parcels  # noqa: E402

from cropattn.cli import main as cli_main, read_run_config  # noqa: E402
from cropattn.dataset import generate_synthetic, load_synthetic_config, make_batch  # noqa: E402
from cropattn.explain import (  # noqa: E402
    ablation_study,
    global_date_importance,
    parcel_tables,
    pca_project,
    rank_key_dates,
)
from cropattn.model import ModelConfig, forward, loss_gradients  # noqa: E402
from cropattn.sensitivity import importance_mass, occlusion_delta, occlusion_study  # noqa: E402
from cropattn.training import TrainConfig, focal_loss, train  # noqa: E402

VERDICTS: dict = {}
TITLES = {
    1: "attention normalization",
    2: "gradient correctness",
    3: "masking invariance",
    4: "parcel importance sums to one",
    5: "key-date recovery",
    6: "ablation fidelity",
    7: "occlusion identity",
    8: "occlusion sensitivity",
    9: "focal loss reductions",
    10: "determinism",
    11: "PCA oracle equivalence",
}
SEEDS = range(10)


def verdict(n, ok, detail):
    VERDICTS[n] = (bool(ok), detail)
    print(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {TITLES[n]}: {detail}")
    assert ok, f"criterion {n} ({TITLES[n]}): {detail}"


def verdict_lines():
    lines = []
    for n, title in TITLES.items():
        if n in VERDICTS:
            ok, detail = VERDICTS[n]
            lines.append(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        else:
            lines.append(f"criterion {n:2d} ERROR {title}: no verdict recorded")
    return lines


# -- fixture runs shared by several criteria ----------------------------------

def run_configs(seed):
    model_kw, train_kw = read_run_config(FIXTURES / "train_small.cfg")
    return ModelConfig(**model_kw), TrainConfig(**{**train_kw, "seed": seed})


def synthetic(name, seed, **overrides):
    cfg = load_synthetic_config(FIXTURES / name)
    return generate_synthetic(dataclasses.replace(cfg, seed=seed, **overrides))


def crop_window(name, crop):
    cfg = load_synthetic_config(FIXTURES / name)
    (lo, hi, _), = next(c for c in cfg.crops if c.name == crop).windows
    return int(lo), int(hi)


@lru_cache(maxsize=None)
def two_class_run(seed):
    dataset = synthetic("two_class.cfg", seed)
    model_config, train_config = run_configs(seed)
    return dataset, train(dataset, model_config, train_config).checkpoint


def random_config(rng, max_dim=16, max_t=10):
    heads = int(rng.choice([1, 2, 4]))
    dim = int(rng.choice([d for d in range(2, max_dim + 1, 2) if d % heads == 0]))
    return ModelConfig(model_dim=dim, num_heads=heads, num_layers=int(rng.integers(1, 3)),
                       num_classes=int(rng.integers(2, 4)), t_max=max_t,
                       feed_forward_dim=int(rng.integers(2, 9)))


# -- 1..3: model mechanics ----------------------------------------------------

def test_criterion_01_attention_normalization():
    rng = np.random.default_rng(1)
    worst, leaks = 0.0, 0
    for i in range(100):
        cfg = random_config(rng)
        lengths = rng.integers(1, 11, size=4).tolist()
        t_max = int(rng.integers(max(lengths), 11))
        batch = make_batch(random_parcels(lengths, seed=i), t_max, ["a", "b"])
        attn = forward(batch, random_params(cfg, i), cfg).attention  # [B, L, H, T, T]
        mask = batch.validity_mask[:, None, None, :]
        sums = attn.sum(axis=-1)
        worst = max(worst, float(np.abs(np.where(mask, sums, 1.0) - 1.0).max()))
        padded = ~(mask[..., :, None] & mask[..., None, :])
        leaks += int(np.count_nonzero(np.where(padded, attn, 0.0)))
    verdict(1, worst <= 1e-6 and leaks == 0, f"max |row sum - 1| = {worst:.2e}, nonzero padded entries = {leaks}")


def test_criterion_02_gradient_correctness():
    rng = np.random.default_rng(2)
    errors = []
    for i in range(5):
        cfg = random_config(rng, max_dim=8, max_t=4)
        lengths = rng.integers(1, 5, size=3).tolist()
        vocab = ["a", "b", "c"][:cfg.num_classes]
        batch = make_batch(random_parcels(lengths, seed=i, crops=vocab), 4, vocab)
        params = random_params(cfg, i)
        _, grads, _ = loss_gradients(batch, params, cfg, 2.0)
        errors.append(max_relative_error(grads, numeric_grads(batch, params, cfg, 2.0)))
    verdict(2, max(errors) < 1e-4, "max relative error per model = " + ", ".join(f"{e:.1e}" for e in errors))


def test_criterion_03_masking_invariance():
    rng = np.random.default_rng(3)
    worst = 0.0
    for i in range(20):
        cfg = dataclasses.replace(random_config(rng), t_max=16)
        parcels = random_parcels(rng.integers(1, 11, size=3).tolist(), seed=i)
        t = max(len(p) for p in parcels)
        params = random_params(cfg, i)
        base = forward(make_batch(parcels, t, ["a", "b"]), params, cfg).logits
        for extra in (1, 6):
            longer = forward(make_batch(parcels, t + extra, ["a", "b"]), params, cfg).logits
            worst = max(worst, float(np.abs(longer - base).max()))
    verdict(3, worst < 1e-6, f"max logit change = {worst:.2e}")


# -- 4..6: explanations on the two-class fixture --------------------------------

def test_criterion_04_parcel_importance_distribution():
    dataset, checkpoint = two_class_run(0)
    tables = parcel_tables(checkpoint, dataset, "test")
    worst = max(abs(sum(t.entries.values()) - 1.0) for t in tables)
    verdict(4, worst <= 1e-6, f"{len(tables)} test parcels, max |sum - 1| = {worst:.2e}")


def test_criterion_05_key_date_recovery():
    lo, hi = crop_window("two_class.cfg", "B")
    hits, tops = 0, []
    for seed in SEEDS:
        dataset, checkpoint = two_class_run(seed)
        ranking = rank_key_dates(global_date_importance(parcel_tables(checkpoint, dataset, "test")))
        day = ranking.dates[0].timetuple().tm_yday
        tops.append(day)
        hits += lo <= day <= hi
    verdict(5, hits >= 9, f"{hits}/10 seeds rank a day in {lo}..{hi} first (top-1 days {tops})")


def test_criterion_06_ablation_fidelity():
    dataset, checkpoint = two_class_run(0)
    model_config, train_config = run_configs(0)
    ranking = rank_key_dates(global_date_importance(parcel_tables(checkpoint, dataset, "test")))
    result = ablation_study(dataset, model_config, train_config, [3, len(ranking)], checkpoint, ranking)
    ref = result.reference.class_accuracy
    top3, full = (m.class_accuracy for _, m in result.curve)
    ok = top3 >= 0.9 * ref and abs(full - ref) <= 0.02
    verdict(6, ok, f"reference {ref:.3f}, top-3 {top3:.3f} (bound {0.9 * ref:.3f}), "
                   f"t={len(ranking)} {full:.3f}")


# -- 7..8: crop occlusion -----------------------------------------------------

def test_criterion_07_occlusion_identity():
    dataset = synthetic("three_class.cfg", 0, observation_probability=1.0, jitter_days=0.0, parcels_per_class=20)
    model_config, train_config = run_configs(0)
    train_config = dataclasses.replace(train_config, max_epochs=10)
    reference = train(dataset, model_config, train_config).checkpoint
    tables = parcel_tables(reference, dataset, "test")
    self_delta = occlusion_delta(tables, tables, dataset.class_vocabulary)
    identity = all(v == 0.0 for v in self_delta.entries.values())
    same, occluded = occlusion_study(dataset, model_config, train_config, [None, "C"], reference)
    retrain_zero = all(v == 0.0 for v in same.delta.entries.values())
    sums = [abs(sum(occluded.delta.for_crop(c).values())) for c in ("A", "B")]
    ok = identity and retrain_zero and max(sums) <= 1e-6
    verdict(7, ok, f"self deltas zero: {identity}, same-seed retrain zero: {retrain_zero}, "
                   f"max |per-crop delta sum| after occluding C = {max(sums):.1e}")


def test_criterion_08_occlusion_sensitivity():
    lo, hi = crop_window("three_class.cfg", "C")
    reduced, pairs = 0, []
    for seed in SEEDS:
        dataset = synthetic("three_class.cfg", seed)
        model_config, train_config = run_configs(seed)
        reference = train(dataset, model_config, train_config).checkpoint
        before = importance_mass(parcel_tables(reference, dataset, "test"), "A", lo, hi)
        result, = occlusion_study(dataset, model_config, train_config, ["C"], reference)
        after = importance_mass(result.tables, "A", lo, hi)
        pairs.append(f"{before:.2f}->{after:.2f}")
        reduced += after < before
    verdict(8, reduced >= 8, f"{reduced}/10 seeds reduce A's mass in {lo}..{hi} ({', '.join(pairs)})")


# -- 9..11 ---------------------------------------------------------------------

def test_criterion_09_focal_loss_reductions():
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(2, 8))
        z = rng.normal(0, 3, k)
        y = int(rng.integers(k))
        top = max(z)
        ce = -(z[y] - top - math.log(math.fsum(math.exp(v - top) for v in z)))
        worst = max(worst, abs(focal_loss(z, y, 0.0) - ce))
    value = focal_loss(np.log([0.9, 0.1]), 0, 2.0)
    ok = worst <= 1e-9 and abs(value - 1.0536e-3) <= 1e-7
    verdict(9, ok, f"max |FL(0) - CE| = {worst:.1e}; FL(2, p=0.9) = {value:.7e}")


def test_criterion_10_determinism(tmp_path):
    data = tmp_path / "data"
    assert cli_main(["synth", "--config", str(FIXTURES / "two_class.cfg"), "--seed", "0", "--out", str(data)]) == 0
    for run in ("a", "b"):
        code = cli_main(["train", "--data", str(data), "--config", str(FIXTURES / "train_small.cfg"),
                         "--seed", "0", "--out", str(tmp_path / run)])
        assert code == 0
    names = ["checkpoint.json", "metrics.json", "confusion_matrix.csv"]
    same = [(tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names]
    verdict(10, all(same), ", ".join(f"{n} {'identical' if s else 'DIFFERS'}" for n, s in zip(names, same)))


def test_criterion_11_pca_oracle():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(50):
        n, dim = int(rng.integers(3, 13)), int(rng.integers(2, 7))
        points = rng.normal(size=(n, dim)) * rng.uniform(0.2, 3.0, dim)
        components = min(2, dim, n - 1)
        coords, explained, _ = pca_project(points, components)
        ref_coords, ref_explained = oracle_pca(points.tolist(), components)
        worst = max(worst, float(np.abs(coords - np.array(ref_coords)).max()),
                    float(np.abs(explained - np.array(ref_explained)).max()))
    verdict(11, worst <= 1e-8, f"50 instances, max deviation = {worst:.1e}")


if __name__ == "__main__":
    import tempfile

    started = time.time()
    for name, fn in sorted(globals().items()):
        if name.startswith("test_criterion_"):
            try:
                if "tmp_path" in fn.__code__.co_varnames[:fn.__code__.co_argcount]:
                    with tempfile.TemporaryDirectory() as tmp:
                        fn(Path(tmp))
                else:
                    fn()
            except AssertionError:
                pass
    print(f"\n{sum(ok for ok, _ in VERDICTS.values())}/{len(TITLES)} criteria pass "
          f"in {time.time() - started:.0f}s")
    sys.exit(0 if all(ok for ok, _ in VERDICTS.values()) and len(VERDICTS) == len(TITLES) else 1)

