"""
Contrast GAN against the baselines on one phantom cohort
========================================================

:func:`cdgan.experiments.run_experiment` trains every model on the same
unpaired training subjects, evaluates them on the same paired test subjects
and tabulates accuracy plus per-phase recall. The paired t-test then uses
per-subject accuracies, so each test subject is one pair of observations.

A shrunken regime keeps this short. At 200 iterations the GAN has barely
started, so the demo shows the mechanics, not the ranking. The
acceptance-scale regimes are ``EASY``, ``HARD`` and ``DEGENERATE`` in the
same module; pass their name to run one of them instead (expect tens of
minutes on a CPU).
"""

import dataclasses
import sys

import torch

from cdgan import experiments
from cdgan.experiments import Regime, run_experiment

torch.set_num_threads(1)

name = sys.argv[1] if len(sys.argv) > 1 else "demo"
if name == "demo":
    regime = Regime("demo", subjects_per_phase=4, split_fraction=0.75, slices_per_volume=8,
                    image_size=(32, 32), iterations=200)
else:
    regime = getattr(experiments, name.upper())

models = ["cdgan", "resnet", "unet", "stargan_d"]
print(dataclasses.asdict(regime))

res = run_experiment(regime, models, seeds=[0], root=f"demo_output/compare_{regime.name}")
print(res.table())

# per-subject paired t-test between the first two models
a, b = models[:2]
cmp = res.compare(a, b)
print(f"{a} vs {b}: mean {cmp['mean_accuracy_a']:.3f} vs {cmp['mean_accuracy_b']:.3f}, "
      f"t = {cmp['t']:.3f}, p = {cmp['p']:.4g} over {cmp['n_subjects']} subjects")
