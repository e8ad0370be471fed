"""Train a small pore detector on synthetic fingerprints and evaluate it.

Run from the repository root:  python demos/detect_pores.py
"""
import logging

from poreid.data import RunConfig
from poreid.experiments import detection_experiment

logging.basicConfig(level=logging.INFO, format="%(message)s")

# A short schedule keeps the demo to a few minutes on one core.
cfg = RunConfig({"seed": 0, "detector.steps": 300, "detector.eval_every": 100,
                 "detector.decay_every": 100, "detector.decay_factor": 0.5})
res = detection_experiment(cfg, out="demo_out/detection")

print(f"thresholds chosen on validation: p_t={res.p_t}, i_t={res.i_t} (F={res.val_f:.3f})")
print("pooled test report:")
print(res.test.as_text())
print(f"{res.seconds:.0f} s; model and logs in demo_out/detection/")
