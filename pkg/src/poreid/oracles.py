"""Slow, literal reference implementations used to cross-check the
vectorised code paths (by the test suite and ``poreid selftest``)."""
from __future__ import annotations

import math

import numpy as np


def nms_reference(centers, probs, iou_threshold, size=7):
    """Repeatedly keeps the best remaining box and drops every remaining box
    overlapping it by more than the threshold."""
    remaining = list(range(len(probs)))
    keep = []
    while remaining:
        best = min(remaining, key=lambda k: (-probs[k], centers[k][0], centers[k][1]))
        keep.append(best)
        remaining.remove(best)
        survivors = []
        for k in remaining:
            a, b = centers[best], centers[k]
            ov_r = max(0.0, size - abs(a[0] - b[0]))
            ov_c = max(0.0, size - abs(a[1] - b[1]))
            inter = ov_r * ov_c
            if inter / (2 * size * size - inter) <= iou_threshold:
                survivors.append(k)
        remaining = survivors
    return keep


def ratio_match_reference(A, B, ratio):
    """Mutual nearest neighbours passing the ratio test in both directions,
    by explicit loops. Ties go to the lower index."""
    na, nb = len(A), len(B)
    if na < 2 or nb < 2:
        return []
    d = [[math.sqrt(sum((float(x) - float(y)) ** 2 for x, y in zip(A[i], B[j])))
          for j in range(nb)] for i in range(na)]
    out = []
    for i in range(na):
        row = d[i]
        j = min(range(nb), key=lambda k: (row[k], k))
        col = [d[k][j] for k in range(na)]
        if min(range(na), key=lambda k: (col[k], k)) != i:
            continue
        second_row = sorted(row)[1]
        second_col = sorted(col)[1]
        if row[j] < ratio * second_row and row[j] < ratio * second_col:
            out.append((i, j))
    return out


def true_positive_reference(D, G):
    """Number of detections that are the nearest detection of their own
    nearest ground-truth point (lexicographic tie breaking)."""
    def nearest(p, pts):
        return min(range(len(pts)), key=lambda k: ((p[0] - pts[k][0]) ** 2 + (p[1] - pts[k][1]) ** 2,
                                                   pts[k][0], pts[k][1]))
    if not len(D) or not len(G):
        return 0
    tp = 0
    for i, d in enumerate(D):
        j = nearest(d, G)
        if nearest(G[j], D) == i:
            tp += 1
    return tp


def median_reference(img, ksize=3):
    """Median over each window with edge replication."""
    img = np.asarray(img)
    h, w = img.shape
    r = ksize // 2
    out = np.empty_like(img)
    for y in range(h):
        for x in range(w):
            vals = [img[min(max(y + dy, 0), h - 1), min(max(x + dx, 0), w - 1)]
                    for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
            out[y, x] = sorted(vals)[len(vals) // 2]
    return out


def triplet_reference(emb, labels, margin):
    """Semi-hard triplet loss by enumeration of every ordered
    anchor-positive pair."""
    e = np.asarray(emb, np.float64)
    n = len(labels)
    d = [[float(np.sqrt(((e[i] - e[j]) ** 2).sum())) for j in range(n)] for i in range(n)]
    terms = []
    for a in range(n):
        for p in range(n):
            if p == a or labels[p] != labels[a]:
                continue
            negs = [k for k in range(n) if labels[k] != labels[a]]
            farther = [k for k in negs if d[a][k] > d[a][p]]
            if farther:
                k = min(farther, key=lambda k: (d[a][k], k))
            else:
                k = max(negs, key=lambda k: (d[a][k], -k))
            terms.append(max(0.0, d[a][p] - d[a][k] + margin))
    return sum(terms) / len(terms)


def rigid_residual(P, Q, angle, t):
    c, s = math.cos(angle), math.sin(angle)
    Q = np.asarray(Q, np.float64)
    moved = np.stack([c * Q[:, 0] - s * Q[:, 1] + t[0], s * Q[:, 0] + c * Q[:, 1] + t[1]], 1)
    return float(((np.asarray(P) - moved) ** 2).sum(axis=1).mean())
