"""
Registering a synthetic phantom pair
====================================

Generate one fixed/moving pair with a known smooth deformation, register it
with each hand-crafted driving point selector, and compare label overlap
before and after.
"""

import numpy as np

from dpreg import RegistrationConfig, SyntheticSpec, synth_generate
from dpreg.metrics import hessian_norm_mean
from dpreg.pipeline import evaluate_pair, unregistered_report

# One 32^3 pair: four labelled ellipsoids inside a body, warped by a
# Gaussian-smoothed random field of at most 6 voxels per component.
pair = synth_generate(SyntheticSpec(seed=3), 1)[0]
print("ground-truth max displacement:", np.abs(pair.field.data).max().round(2))
print("unregistered Dice:", round(unregistered_report(pair).dice_mean, 4))

# MIND descriptors with a regular grid and with Foerstner keypoints.
for selector in ("grid", "foerstner"):
    cfg = RegistrationConfig(features="mind", selector=selector)
    report, result = evaluate_pair(pair, cfg)
    print(f"{selector:9s} Dice {report.dice_mean:.4f}  "
          f"points {len(result.points)}  mean Hessian {hessian_norm_mean(result.field):.4f}")

# The marginals are full distributions over the 343 candidate displacements;
# their entropy shows how confident each driving point is.
q = result.marginals
entropy = -(q * np.log(np.clip(q, 1e-300, None))).sum(axis=1)
print("marginal entropy per point: min %.3f, median %.3f, max %.3f"
      % (entropy.min(), np.median(entropy), entropy.max()))
