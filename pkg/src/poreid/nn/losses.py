from __future__ import annotations

import numpy as np

from .layers import ShapeError, sigmoid

PROB_CLAMP = 1e-7


class InvalidBatchError(ValueError):
    """Raised when a batch cannot form any anchor-positive pair for some label."""


def binary_cross_entropy(probs, labels) -> float:
    """Mean binary cross-entropy of probabilities clamped to [1e-7, 1 - 1e-7]."""
    probs = np.asarray(probs, np.float64)
    labels = np.asarray(labels, np.float64)
    if probs.shape != labels.shape:
        raise ShapeError(f"predictions {probs.shape} vs labels {labels.shape}")
    p = np.clip(probs, PROB_CLAMP, 1 - PROB_CLAMP)
    return float(-(labels * np.log(p) + (1 - labels) * np.log(1 - p)).mean())


def sigmoid_cross_entropy(logits, labels):
    """Fused sigmoid + binary cross-entropy.

    Returns ``(loss, dlogits, probs)``; the gradient is taken with respect
    to the pre-sigmoid logits, ``(sigmoid(z) - y) / n``.
    """
    labels = np.asarray(labels)
    if logits.size != labels.size:
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    z = logits.reshape(-1).astype(np.float64)
    y = labels.reshape(-1).astype(np.float64)
    probs = sigmoid(z)
    # log(1 + exp(-|z|)) form keeps both tails finite
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = float(per.mean())
    grad = ((probs - y) / z.size).reshape(logits.shape).astype(logits.dtype)
    return loss, grad, probs.reshape(logits.shape)


def pairwise_distances(emb):
    """Euclidean distance matrix in float64."""
    e = np.asarray(emb, np.float64)
    diff = e[:, None, :] - e[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def semihard_negatives(dist, labels):
    """For every ordered anchor-positive pair returns the index of the chosen
    negative.

    The chosen negative is the closest one strictly farther than the
    positive; when none exists, the farthest negative overall.
    Returns arrays ``(anchors, positives, negatives)``.
    """
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    n = len(labels)
    counts = same.sum(axis=1)
    if np.any(counts < 2):
        lonely = np.unique(labels[counts < 2])
        raise InvalidBatchError(f"labels with a single member: {lonely.tolist()}")
    if np.all(same):
        raise InvalidBatchError("batch has no negatives")
    anchors, positives = np.nonzero(same & ~np.eye(n, dtype=bool))
    neg_mask = ~same[anchors]                      # (P, n)
    d_an = dist[anchors]                           # (P, n)
    d_ap = dist[anchors, positives][:, None]
    farther = neg_mask & (d_an > d_ap)
    inf = np.inf
    semihard = np.where(farther, d_an, inf).argmin(axis=1)
    fallback = np.where(neg_mask, d_an, -inf).argmax(axis=1)
    has = farther.any(axis=1)
    negatives = np.where(has, semihard, fallback)
    return anchors, positives, negatives


def triplet_semihard_loss(emb, labels, margin=2.0):
    """Triplet loss with semi-hard negative selection.

    Returns ``(loss, grad)`` where ``grad`` has the shape of ``emb``. The
    loss is the mean of ``max(0, d_ap - d_an + margin)`` over all ordered
    anchor-positive pairs; zero distances contribute no gradient.
    """
    e = np.asarray(emb, np.float64)
    dist = pairwise_distances(e)
    a, p, n = semihard_negatives(dist, labels)
    d_ap = dist[a, p]
    d_an = dist[a, n]
    hinge = d_ap - d_an + margin
    active = hinge > 0
    loss = float(np.where(active, hinge, 0.0).mean())

    grad = np.zeros_like(e)
    scale = active / len(a)

    def unit(i, j, d):
        with np.errstate(invalid="ignore", divide="ignore"):
            u = (e[i] - e[j]) / d[:, None]
        u[d == 0] = 0.0
        return u

    u_ap = unit(a, p, d_ap) * scale[:, None]
    u_an = unit(a, n, d_an) * scale[:, None]
    np.add.at(grad, a, u_ap - u_an)
    np.add.at(grad, p, -u_ap)
    np.add.at(grad, n, u_an)
    return loss, grad.astype(np.asarray(emb).dtype)
