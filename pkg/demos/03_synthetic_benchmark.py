# %% [markdown]
# # Training on the synthetic benchmark
#
# The generator plants perturbation effects in a low-rank gene program space
# and holds out combinations with 0, 1 or 2 unseen genes. We train with the
# desk preset, then ask whether confidence tracks accuracy. Expect about a
# minute on one core.

# %%
import numpy as np
import torch

from prescribe import data, evaluation, training

torch.set_num_threads(1)
ds = data.prepare(data.generate(data.SynthSpec(seed=42)), 10)
print(len(ds.perturbations("train")), "train /", len(ds.perturbations("test")), "test perturbations")

# %%
result = training.train(ds, training.TrainConfig(**training.DESK_CONFIG))
print("best epoch", result.best_epoch, "val l1", round(result.best_val_l1, 4))

# %% [markdown]
# Confidence against per-perturbation Pearson accuracy on the test split.

# %%
records = evaluation.make_records(result.model, ds, "test")
conf = [r.confidence for r in records]
acc = [r.metrics()["pearson"] for r in records]
print("Spearman(conf, acc) =", round(evaluation.spearman(conf, acc), 3))
cal = evaluation.calibration_curve(records, bins=5)
for row in cal.bins:
    print(f"bin {row['bin']}: conf {row['mean_conf']:.3f}  acc {row['mean_acc']:.3f}  n={row['count']}")

# %% [markdown]
# Dropping the least confident tenth should beat dropping a random tenth.

# %%
kept, delta = evaluation.filter_bottom(records, 0.1)
mean, sd = evaluation.random_filter_baseline(records, 0.1, repeats=10)["pearson"]
print(f"filtered {evaluation.summarize(kept)['pearson']:.4f}  random {mean:.4f} +/- {sd:.4f}")

# %% [markdown]
# Evidence should fall as more of a combination is unseen.

# %%
for row in evaluation.difficulty_report(records):
    print(row)
