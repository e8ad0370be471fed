"""Align pairs of synthetic impressions and compare with the true motion.

Run from the repository root:  python demos/align_impressions.py
"""
import math

import numpy as np

from poreid.data import RunConfig
from poreid.experiments import alignment_experiment

runs = alignment_experiment(RunConfig({"seed": 0}), n_pairs=5)
for k, r in enumerate(runs):
    w = " -> ".join(f"{x:.2f}" for x in r.history)
    print(f"pair {k}: angle error {math.degrees(r.angle_error):.4f} deg, "
          f"translation error {r.translation_error:.3f} px, "
          f"{r.iterations} iterations, w: {w}")

print(f"median angle error {np.median([r.angle_error for r in runs]):.5f} rad")
print(f"median translation error {np.median([r.translation_error for r in runs]):.3f} px")
