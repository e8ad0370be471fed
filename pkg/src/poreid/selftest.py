"""Oracle checks behind ``poreid selftest``."""
from __future__ import annotations

import math

import numpy as np

from . import nn, oracles
from .aligner import horn_align
from .detector import build_detector, evaluate_detection, nms
from .handcrafted import match_ratio_mutual
from .imgproc import RigidTransform, median_blur


def check_gradients(full=False):
    rng = np.random.default_rng(0)
    det = build_detector(rng=rng)
    x = rng.random((8, 17, 17, 1))
    y = (rng.random((8, 1, 1, 1)) < 0.5).astype(np.float64)

    def bce(logits):
        loss, grad, _ = nn.sigmoid_cross_entropy(logits, y)
        return loss, grad
    worst = nn.grad_check(det, x, bce, max_probes=40 if full else 8, stop_before="sigmoid")
    if full:
        from .descnet import build_descnet
        dn = build_descnet(rng=rng)
        labels = np.repeat(np.arange(4), 2)
        worst = max(worst, nn.grad_check(dn, rng.standard_normal((8, 32, 32, 1)),
                                         lambda e: nn.triplet_semihard_loss(e, labels, 2.0),
                                         max_probes=20))
    return worst < 1e-4


def check_nms(n, rng):
    for _ in range(n):
        k = int(rng.integers(0, 25))
        centers = rng.integers(0, 20, size=(k, 2)).astype(float)
        probs = np.round(rng.random(k), 1)
        thr = float(rng.choice([0.0, 0.1, 0.3, 0.5, 0.9]))
        if list(nms(centers, probs, thr)) != oracles.nms_reference(centers, probs, thr):
            return False
    return True


def check_matcher(n, rng):
    for _ in range(n):
        a = rng.integers(0, 4, size=(int(rng.integers(0, 9)), 3)).astype(float)
        b = rng.integers(0, 4, size=(int(rng.integers(0, 9)), 3)).astype(float)
        ratio = float(rng.choice([0.5, 0.7, 0.8, 1.0]))
        got = [(i, j) for i, j, _ in match_ratio_mutual(a, b, ratio)]
        if got != oracles.ratio_match_reference(a, b, ratio):
            return False
    return True


def check_true_positives(n, rng):
    for _ in range(n):
        D = rng.integers(0, 12, size=(int(rng.integers(0, 10)), 2)).astype(float)
        G = rng.integers(0, 12, size=(int(rng.integers(0, 10)), 2)).astype(float)
        if evaluate_detection(D, G).true_positives != oracles.true_positive_reference(D, G):
            return False
    return True


def check_median(n, rng):
    for _ in range(n):
        img = rng.integers(0, 5, size=(int(rng.integers(1, 8)), int(rng.integers(1, 8))))
        img = img.astype(np.float32)
        if not np.array_equal(median_blur(img, 3), oracles.median_reference(img, 3)):
            return False
    return True


def check_triplet(n, rng):
    for _ in range(n):
        k = int(rng.integers(2, 5))
        labels = np.repeat(np.arange(k), rng.integers(2, 4, size=k))
        emb = rng.standard_normal((len(labels), 3))
        loss, _ = nn.triplet_semihard_loss(emb, labels, 1.0)
        if abs(loss - oracles.triplet_reference(emb, labels, 1.0)) > 1e-5:
            return False
    return True


def check_horn(n, rng):
    for _ in range(n):
        k = int(rng.integers(2, 51))
        Q = rng.uniform(-100, 100, size=(k, 2))
        T = RigidTransform(float(rng.uniform(-math.pi, math.pi)), *rng.uniform(-50, 50, 2))
        est = horn_align(T.apply(Q), Q)
        if abs(math.remainder(est.angle - T.angle, 2 * math.pi)) > 1e-6:
            return False
        if np.abs(est.translation - T.translation).max() > 1e-6:
            return False
    return True


def run_all(quick=True):
    """Names of the failing checks (empty when everything passes)."""
    n = 200 if quick else 1000
    rng = np.random.default_rng(1)
    checks = {
        "nms": lambda: check_nms(n, rng),
        "matcher": lambda: check_matcher(n, rng),
        "detection-tp": lambda: check_true_positives(n, rng),
        "median-blur": lambda: check_median(n, rng),
        "triplet-loss": lambda: check_triplet(n, rng),
        "horn": lambda: check_horn(n, rng),
        "gradients": lambda: check_gradients(full=not quick),
    }
    return [name for name, fn in checks.items() if not fn()]
