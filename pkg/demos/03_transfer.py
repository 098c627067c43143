"""
Transfer from a large source cohort
===================================

A model pretrained on a big source cohort lends its encoders to a small
target cohort: target features come out of the frozen source model, and
a forest on them is compared against retraining the model from scratch
on the target subjects alone.  With very few target subjects the frozen
encoders usually win.

This is the heaviest demo (a few minutes): the without-transfer arm
retrains once per subsample.
"""

import os

from salvox import data, pipeline

OUT = os.path.join(os.path.dirname(__file__), "out", "03")
os.makedirs(OUT, exist_ok=True)

source = data.generate_phantoms(data.PhantomConfig(
    n_positive=60, n_control=50, side=16, seed=31))
target = data.generate_phantoms(data.PhantomConfig(
    n_positive=11, n_control=9, side=16, seed=32))

spec = pipeline.ExperimentSpec(
    kind="transfer",
    source_dataset=source,
    target_dataset=target,
    cvae=dict(input_side=16, latent_dim=8, conv_filters=(16, 32),
              fc_hidden=64, deconv_filters=(8, 4, 1), kl_weight=4e-4,
              recon_stop_threshold=0.0, max_iterations=300, batch_size=4,
              seed=0),
    sizes=(10, 20),
    curve_k=5,
    repeats=30,
    retrain_repeats=2,
    seed=3,
    output_dir=OUT,
)
report = pipeline.run_experiment(spec)

for arm, points in report.results["curve"].items():
    for p in points:
        print(f"{arm:>16}  size {p['size']:2d}: {p['mean']:.3f} +- {p['std']:.3f}")
print(f"artifacts in {OUT}")
