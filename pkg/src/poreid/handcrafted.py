"""Hand-crafted pore descriptors and the mutual nearest-neighbour ratio matcher."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imgproc import as_image, extract_patches

ORI_BINS = 36
GRID = 4
HIST_BINS = 8
CLAMP = 0.2


def image_gradients(img):
    """Central-difference gradients along rows and columns (edge replicated)."""
    p = np.pad(as_image(img).astype(np.float64), 1, mode="edge")
    d_row = (p[2:, 1:-1] - p[:-2, 1:-1]) * 0.5
    d_col = (p[1:-1, 2:] - p[1:-1, :-2]) * 0.5
    return d_row, d_col


def _window(shape, centers, radius):
    """Integer pixel window around each rounded centre.

    Returns ``(rows, cols, inside)`` of shape ``(K, (2r+1)**2)`` together with
    the exact offsets ``(d_row, d_col)`` from the real-valued centre.
    """
    h, w = shape
    off = np.arange(-radius, radius + 1)
    orr, occ = np.meshgrid(off, off, indexing="ij")
    base = np.rint(centers).astype(np.int64)
    rows = base[:, 0, None] + orr.ravel()[None]
    cols = base[:, 1, None] + occ.ravel()[None]
    inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    d_row = rows - centers[:, 0, None]
    d_col = cols - centers[:, 1, None]
    return np.clip(rows, 0, h - 1), np.clip(cols, 0, w - 1), inside, d_row, d_col


def dominant_orientations(mag, ori, centers, sigma):
    """Peak of a smoothed, Gaussian-weighted 36-bin orientation histogram,
    refined by parabolic interpolation. Angles measured from the column axis
    towards the row axis, in radians."""
    radius = int(round(3 * sigma))
    rows, cols, inside, dr, dc = _window(mag.shape, centers, radius)
    weight = np.exp(-(dr ** 2 + dc ** 2) / (2 * sigma ** 2)) * mag[rows, cols] * inside
    weight *= (dr ** 2 + dc ** 2) <= radius ** 2
    b = ori[rows, cols] * ORI_BINS / (2 * math.pi)
    b0 = np.floor(b).astype(np.int64)
    frac = b - b0
    k = len(centers)
    flat = np.arange(k)[:, None] * ORI_BINS
    hist = np.bincount((flat + b0 % ORI_BINS).ravel(), (weight * (1 - frac)).ravel(),
                       minlength=k * ORI_BINS)
    hist += np.bincount((flat + (b0 + 1) % ORI_BINS).ravel(), (weight * frac).ravel(),
                        minlength=k * ORI_BINS)
    hist = hist.reshape(k, ORI_BINS)
    sm = (np.roll(hist, 2, 1) + np.roll(hist, -2, 1)) / 16 \
        + 4 * (np.roll(hist, 1, 1) + np.roll(hist, -1, 1)) / 16 + 6 * hist / 16
    peak = sm.argmax(axis=1)
    left = sm[np.arange(k), (peak - 1) % ORI_BINS]
    mid = sm[np.arange(k), peak]
    right = sm[np.arange(k), (peak + 1) % ORI_BINS]
    denom = left - 2 * mid + right
    with np.errstate(invalid="ignore", divide="ignore"):
        shift = np.where(denom != 0, 0.5 * (left - right) / denom, 0.0)
    return ((peak + shift + 0.5) * 2 * math.pi / ORI_BINS) % (2 * math.pi)


@dataclass
class DescriptorSet:
    vectors: np.ndarray      # (K, dim) float32
    keypoints: np.ndarray    # (K, 2) float64
    valid: np.ndarray        # (K,) bool; False for all-zero fallbacks

    def __len__(self):
        return len(self.vectors)


def sift_describe(img, keypoints, scale=8.0, orientation_sigma=None, cell=None):
    """128-d SIFT descriptors at given keypoints (no detection stage).

    ``scale`` is the keypoint diameter in pixels, with the usual SIFT
    footprint for that size: 4x4 cells of ``3 * scale / 2`` pixels each
    (8 orientation bins), rotated to the dominant gradient orientation found
    with a Gaussian of sigma ``1.5 * scale / 2``. Vectors are normalised,
    clamped at 0.2 and renormalised. Keypoints whose support lies entirely
    outside the image get a zero vector and ``valid=False``.
    """
    img = as_image(img)
    pts = np.asarray(keypoints, np.float64).reshape(-1, 2)
    k = len(pts)
    if not k:
        return DescriptorSet(np.zeros((0, 128), np.float32), pts, np.zeros(0, bool))
    d_row, d_col = image_gradients(img)
    mag = np.hypot(d_row, d_col)
    ori = np.arctan2(d_row, d_col) % (2 * math.pi)
    sigma_o = 0.75 * scale if orientation_sigma is None else orientation_sigma
    theta = dominant_orientations(mag, ori, pts, sigma_o)

    cell = 1.5 * scale if cell is None else cell
    radius = int(math.ceil(cell * math.sqrt(2) * (GRID + 1) * 0.5))
    rows, cols, inside, dr, dc = _window(img.shape, pts, radius)
    cos_t = np.cos(theta)[:, None]
    sin_t = np.sin(theta)[:, None]
    # coordinates in the keypoint frame: x along the dominant orientation
    x = (dc * cos_t + dr * sin_t) / cell
    y = (-dc * sin_t + dr * cos_t) / cell
    xb = x + GRID / 2 - 0.5
    yb = y + GRID / 2 - 0.5
    keep = inside & (xb > -1) & (xb < GRID) & (yb > -1) & (yb < GRID)
    gauss = np.exp(-(x ** 2 + y ** 2) / (2 * (GRID / 2) ** 2))
    weight = mag[rows, cols] * gauss * keep
    ob = ((ori[rows, cols] - theta[:, None]) % (2 * math.pi)) * HIST_BINS / (2 * math.pi)

    y0 = np.clip(np.floor(yb), -1, GRID - 1).astype(np.int64)
    x0 = np.clip(np.floor(xb), -1, GRID - 1).astype(np.int64)
    o0 = np.floor(ob).astype(np.int64)
    fy, fx, fo = yb - y0, xb - x0, ob - o0
    size = (GRID + 2) * (GRID + 2) * HIST_BINS
    acc = np.zeros(k * size)
    base = np.arange(k)[:, None] * size
    for iy, wy in ((0, 1 - fy), (1, fy)):
        for ix, wx in ((0, 1 - fx), (1, fx)):
            for io, wo in ((0, 1 - fo), (1, fo)):
                idx = base + ((y0 + iy + 1) * (GRID + 2) + (x0 + ix + 1)) * HIST_BINS \
                    + (o0 + io) % HIST_BINS
                acc += np.bincount(idx.ravel(), (weight * wy * wx * wo).ravel(),
                                   minlength=k * size)
    hist = acc.reshape(k, GRID + 2, GRID + 2, HIST_BINS)[:, 1:-1, 1:-1, :].reshape(k, -1)
    vec = _normalize_clamp(hist)
    valid = inside.any(axis=1)
    vec[~valid] = 0
    return DescriptorSet(vec.astype(np.float32), pts, valid)


def _normalize_clamp(hist):
    norm = np.linalg.norm(hist, axis=1, keepdims=True)
    out = np.divide(hist, norm, out=np.zeros_like(hist), where=norm > 0)
    out = np.minimum(out, CLAMP)
    norm = np.linalg.norm(out, axis=1, keepdims=True)
    return np.divide(out, norm, out=np.zeros_like(out), where=norm > 0)


def dp_describe(img, keypoints, patch=32):
    """Contrast-normalised raw patches: the 33x33 patch around each keypoint
    with its last row and column dropped, flattened, mean-subtracted and
    scaled to unit norm (zero for constant patches). No rotation
    normalisation."""
    pts = np.asarray(keypoints, np.float64).reshape(-1, 2)
    if not len(pts):
        return DescriptorSet(np.zeros((0, patch * patch), np.float32), pts, np.zeros(0, bool))
    patches = extract_patches(img, pts, patch + 1)[:, :patch, :patch]
    vec = patches.reshape(len(pts), -1).astype(np.float64)
    vec -= vec.mean(axis=1, keepdims=True)
    norm = np.linalg.norm(vec, axis=1, keepdims=True)
    flat = norm[:, 0] <= 1e-12
    vec = np.divide(vec, norm, out=np.zeros_like(vec), where=~flat[:, None])
    return DescriptorSet(vec.astype(np.float32), pts, ~flat)


def descriptor_distances(a, b) -> np.ndarray:
    """Exact euclidean distances (difference form, so swapping the
    arguments transposes the result bit for bit)."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    out = np.empty((len(a), len(b)))
    step = max(1, 2_000_000 // max(1, len(b) * a.shape[1]))
    for s in range(0, len(a), step):
        diff = a[s:s + step, None, :] - b[None, :, :]
        out[s:s + step] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return out


def match_distance_matrix(dist, ratio):
    """Mutual nearest neighbours under ``dist`` (rows index A, columns B) that
    pass the ratio test in both directions. Equal distances resolve to the
    lower index. Returns a list of ``(i, j, distance)``; empty when either
    side has fewer than two elements."""
    dist = np.asarray(dist, np.float64)
    na, nb = dist.shape
    if na < 2 or nb < 2:
        return []
    nn_ab = dist.argmin(axis=1)
    nn_ba = dist.argmin(axis=0)
    best_a = dist[np.arange(na), nn_ab]
    best_b = dist[nn_ba, np.arange(nb)]
    second_a = np.partition(dist, 1, axis=1)[:, 1]
    second_b = np.partition(dist, 1, axis=0)[1, :]
    out = []
    for i in range(na):
        j = nn_ab[i]
        if nn_ba[j] != i:
            continue
        d = best_a[i]
        if d < ratio * second_a[i] and d < ratio * second_b[j]:
            out.append((i, int(j), float(d)))
    return out


def match_ratio_mutual(a, b, ratio=0.7):
    """Matches two descriptor sets (arrays or ``DescriptorSet``)."""
    va = a.vectors if isinstance(a, DescriptorSet) else np.asarray(a)
    vb = b.vectors if isinstance(b, DescriptorSet) else np.asarray(b)
    if not 0 < ratio <= 1:
        raise ValueError("ratio must lie in (0, 1]")
    if len(va) < 2 or len(vb) < 2:
        return []
    if va.shape[1] != vb.shape[1]:
        raise ValueError(f"descriptor dimensions differ: {va.shape[1]} vs {vb.shape[1]}")
    return match_distance_matrix(descriptor_distances(va, vb), ratio)


def save_descriptors(ds: DescriptorSet, path, metadata=None) -> None:
    """Writes ``descriptors`` and ``keypoints`` tensors in the model
    container format."""
    from .nn import container
    container.save(path, {"descriptors": ds.vectors, "keypoints": ds.keypoints,
                          "valid": ds.valid.astype(np.float32)}, metadata)


def load_descriptors(path) -> DescriptorSet:
    from .nn import container
    t, _ = container.load(path)
    valid = t["valid"] > 0 if "valid" in t else np.ones(len(t["descriptors"]), bool)
    return DescriptorSet(t["descriptors"], t["keypoints"].astype(np.float64), valid)
