"""
Latent features into a random forest
====================================

Loads the checkpoint from demo 01, pulls per-subject latent features
from both channels, and scores them with stratified K-fold forests.
The salient condition (positives' salient channel against controls'
background channel) should separate cleanly; the shared condition
(background channel for everyone) should sit near chance.
"""

import os

import numpy as np

from salvox import cvae, data, forest

HERE = os.path.dirname(__file__)
ckpt = os.path.join(HERE, "out", "01", "checkpoint.bin")
if not os.path.exists(ckpt):
    raise SystemExit("run 01_cohort_and_training.py first")

params = cvae.load_checkpoint(ckpt)
cohort = data.generate_phantoms(data.PhantomConfig(
    n_positive=14, n_control=12, side=16, seed=5))
normalized = data.preprocess_dataset(cohort, 16)

positives = [s for s in normalized.subjects if s.label == data.POSITIVE]
controls = [s for s in normalized.subjects if s.label == data.CONTROL]
pos_ds = data.LabeledDataset(positives, None)
ctl_ds = data.LabeledDataset(controls, None)

# salient condition: each cohort member contributes the channel that
# carries its class-specific information
f_sal = cvae.extract_features(params, pos_ds, which=cvae.SALIENT,
                              mode=cvae.MEAN).values
f_ctl = cvae.extract_features(params, ctl_ds, which=cvae.BACKGROUND,
                              mode=cvae.MEAN).values
salient_vals = np.vstack([f_sal, f_ctl])
labels = [data.POSITIVE] * len(positives) + [data.CONTROL] * len(controls)

# shared condition: background channel for everyone
shared_vals = cvae.extract_features(params, normalized, which=cvae.BACKGROUND,
                                    mode=cvae.MEAN).values

fcfg = forest.ForestConfig(n_trees=100, seed=0)
for k in (3, 5):
    a = forest.kfold_accuracy(salient_vals, labels, k=k, seed=(0, k), config=fcfg)
    b = forest.kfold_accuracy(shared_vals, labels, k=k, seed=(0, k), config=fcfg)
    print(f"k={k}: salient {a.mean:.3f} +- {a.std:.3f}   "
          f"shared {b.mean:.3f} +- {b.std:.3f}")

# accuracy against training-set size, error bars over repeated subsamples
points = forest.sample_size_curve(salient_vals, labels, sizes=(10, 18, 26),
                                  repeats=30, k=3, seed=2, config=fcfg)
for p in points:
    print(f"size {p.size:2d}: {p.mean:.3f} +- {p.std:.3f}")
