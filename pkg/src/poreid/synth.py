"""Synthetic high-resolution fingerprints with exact pore ground truth.

A master is a smoothly bent sinusoidal ridge pattern, perturbed with noise
and cleaned up by iterated oriented Gabor filtering (the noise level sets how
many ridge endings survive); pores are bright blobs centred on ridge centre
lines. Impressions are rigid warps of the master's ridge image, optionally
with elastic distortion, pressure and contrast changes, with the pores
re-rendered at their (jittered) projected positions, so every impression's
ground truth and its transform relative to the master are known exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import cv2
import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize

from .imgproc import RigidTransform, bilinear_sample


@dataclass
class SynthConfig:
    size: tuple = (128, 128)          # impression (rows, cols)
    margin: int = 0                   # extra master border around the impression frame
    ridge_period: float = 12.0        # px
    orientation_smoothness: float = 40.0   # px, correlation length of the ridge bending
    bend: float = 1.5                 # rms ridge displacement, in ridge periods
    defects: float = 1.0              # seed noise; more noise gives more ridge endings
    pore_density: float = 0.03        # pores per pixel of ridge centre line
    pore_radius: tuple = (1.5, 3.5)   # px; areas ~7-38 px^2
    pore_amplitude: tuple = (0.35, 0.55)
    min_pore_separation: float = 9.0  # px
    ridge_level: float = 0.2          # intensity at ridge centre
    valley_level: float = 0.85
    noise: float = 0.03
    sessions: int = 2
    per_session: int = 3
    rotation_spread: float = math.radians(15)   # uniform in +-spread
    translation_spread: float = 30.0            # px, uniform in +-spread per axis
    jitter: float = 0.5               # px, per-pore positional jitter (clipped at 3 sigma)
    pore_dropout: float = 0.0         # probability a pore is invisible in an impression
    amplitude_jitter: float = 0.0     # relative std of per-impression pore amplitude
    brightness_jitter: float = 0.0
    contrast_jitter: float = 0.0
    elastic: float = 0.0              # px, rms of a smooth per-impression displacement field
    elastic_scale: float = 32.0       # px, correlation length of that field
    pressure: float = 0.0             # std of a per-impression ridge-width shift
    gabor_iterations: int = 12

    @property
    def canvas(self):
        return (self.size[0] + 2 * self.margin, self.size[1] + 2 * self.margin)


@dataclass
class Master:
    base: np.ndarray          # ridge image without pores or noise
    image: np.ndarray         # base + pores + noise, clipped to [0, 1]
    pores: np.ndarray         # (n, 2) exact pore centres
    radii: np.ndarray
    amplitudes: np.ndarray
    ridge_length: int
    orientation: np.ndarray
    ridge: np.ndarray = None  # ridge field in [-1, 1], negative on ridges


@dataclass
class Impression:
    image: np.ndarray
    transform: RigidTransform     # master frame -> impression frame
    pores: np.ndarray             # ground truth inside the impression
    pore_ids: np.ndarray          # index into Master.pores
    session: int
    index: int


@dataclass
class SynthSubject:
    master: Master
    impressions: list = field(default_factory=list)

    def relative_transform(self, a, b) -> RigidTransform:
        """Maps impression-``b`` coordinates into impression ``a``."""
        ta = self.impressions[a].transform
        tb = self.impressions[b].transform
        return ta.compose(tb.inverse())


def phase_field(shape, period, smoothness, bend, rng):
    """Ridge phase (px) of parallel lines in a random direction bent by a
    smooth random warp, and the ridge orientation (radians, mod pi) it
    implies."""
    h, w = shape
    base = rng.uniform(0, math.pi)
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    warp = ndimage.gaussian_filter(rng.standard_normal(shape), smoothness, mode="reflect")
    warp *= bend * period / max(warp.std(), 1e-12)
    phase = rr * math.cos(base) + cc * math.sin(base) + warp
    g_row, g_col = np.gradient(phase)
    orientation = (np.arctan2(g_row, g_col) + math.pi / 2) % math.pi
    return phase, orientation


def gabor_bank(period, n_orient=16):
    sigma = 0.45 * period
    half = int(math.ceil(2.5 * sigma))
    yy, xx = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    bank = []
    for k in range(n_orient):
        th = k * math.pi / n_orient
        # ridges run along th; the carrier oscillates across them
        across = -xx * math.sin(th) + yy * math.cos(th)
        g = np.exp(-(xx ** 2 + yy ** 2) / (2 * sigma ** 2)) * np.cos(2 * math.pi * across / period)
        g -= g.mean()
        bank.append((g / np.abs(g).sum()).astype(np.float32))
    return bank


def ridge_pattern(orientation, seed, period, iterations):
    """Iterated oriented Gabor filtering of ``seed``, rescaled to span
    [-1, 1]; negative on ridges."""
    n = 16
    bank = gabor_bank(period, n)
    pos = orientation / math.pi * n
    k0 = np.floor(pos).astype(int) % n
    frac = (pos - np.floor(pos)).astype(np.float32)
    v = np.asarray(seed, np.float32)
    for _ in range(iterations):
        responses = np.stack([cv2.filter2D(v, -1, g, borderType=cv2.BORDER_REFLECT) for g in bank])
        r0 = np.take_along_axis(responses, k0[None], 0)[0]
        r1 = np.take_along_axis(responses, ((k0 + 1) % n)[None], 0)[0]
        v = (1 - frac) * r0 + frac * r1
        v = np.tanh(3.0 * v / (np.std(v) + 1e-12)).astype(np.float32)
    return v / max(float(np.abs(v).max()), 1e-12)


def ridge_centerline(pattern):
    return skeletonize(pattern < 0)


def place_pores(skeleton, count, min_sep, rng):
    cand = np.argwhere(skeleton)
    rng.shuffle(cand)
    chosen = []
    grid = {}
    cell = max(min_sep, 1.0)
    for p in cand:
        if len(chosen) >= count:
            break
        key = (int(p[0] // cell), int(p[1] // cell))
        ok = True
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                for q in grid.get((key[0] + dr, key[1] + dc), ()):
                    if (p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 < min_sep ** 2:
                        ok = False
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            chosen.append(p)
            grid.setdefault(key, []).append(p)
    return np.asarray(chosen, np.float64).reshape(-1, 2)


def render_pores(img, pores, radii, amplitudes):
    """Adds Gaussian blobs (sigma = radius / 1.5) in place and returns img."""
    h, w = img.shape
    for (r, c), rad, amp in zip(pores, radii, amplitudes):
        s = rad / 1.5
        half = int(math.ceil(3 * s))
        r0, r1 = max(int(math.floor(r)) - half, 0), min(int(math.ceil(r)) + half + 1, h)
        c0, c1 = max(int(math.floor(c)) - half, 0), min(int(math.ceil(c)) + half + 1, w)
        if r0 >= r1 or c0 >= c1:
            continue
        yy, xx = np.mgrid[r0:r1, c0:c1]
        img[r0:r1, c0:c1] += amp * np.exp(-((yy - r) ** 2 + (xx - c) ** 2) / (2 * s * s))
    return img


def gen_master(cfg: SynthConfig, rng) -> Master:
    shape = cfg.canvas
    phase, theta = phase_field(shape, cfg.ridge_period, cfg.orientation_smoothness, cfg.bend, rng)
    seed = np.cos(2 * math.pi * phase / cfg.ridge_period) + cfg.defects * rng.standard_normal(shape)
    v = ridge_pattern(theta, seed, cfg.ridge_period, cfg.gabor_iterations)
    mid = 0.5 * (cfg.ridge_level + cfg.valley_level)
    amp = 0.5 * (cfg.valley_level - cfg.ridge_level)
    base = (mid + amp * v).astype(np.float32)
    skel = ridge_centerline(v)
    length = int(skel.sum())
    count = int(round(cfg.pore_density * length))
    pores = place_pores(skel, count, cfg.min_pore_separation, rng)
    radii = rng.uniform(*cfg.pore_radius, size=len(pores))
    amps = rng.uniform(*cfg.pore_amplitude, size=len(pores))
    img = render_pores(base.astype(np.float64), pores, radii, amps)
    if cfg.noise:
        img += rng.standard_normal(shape) * cfg.noise
    return Master(base, np.clip(img, 0, 1).astype(np.float32), pores, radii, amps,
                  length, theta, v)


def sample_transform(cfg: SynthConfig, rng) -> RigidTransform:
    """Rotation about the canvas centre plus a shift, mapped so the
    impression frame is the central ``size`` window of the canvas."""
    h, w = cfg.canvas
    angle = rng.uniform(-cfg.rotation_spread, cfg.rotation_spread) if cfg.rotation_spread else 0.0
    shift = (rng.uniform(-cfg.translation_spread, cfg.translation_spread, size=2)
             if cfg.translation_spread else np.zeros(2))
    t = RigidTransform.about(angle, ((h - 1) / 2, (w - 1) / 2), shift)
    crop = RigidTransform(0.0, -cfg.margin, -cfg.margin)
    return crop.compose(t)


def clipped_jitter(n, sigma, rng):
    if sigma <= 0:
        return np.zeros((n, 2))
    j = rng.standard_normal((n, 2)) * sigma
    norm = np.linalg.norm(j, axis=1, keepdims=True)
    limit = 3 * sigma
    return np.where(norm > limit, j * limit / np.maximum(norm, 1e-12), j)


def elastic_field(shape, rms, scale, rng):
    """Smooth random displacement ``(2, h, w)`` with the given rms length."""
    if rms <= 0:
        return np.zeros((2,) + tuple(shape))
    d = np.stack([ndimage.gaussian_filter(rng.standard_normal(shape), scale, mode="reflect")
                  for _ in range(2)])
    d *= rms / max(math.sqrt((d ** 2).sum(axis=0).mean()), 1e-12)
    return d


def render_impression(master: Master, T: RigidTransform, cfg: SynthConfig, rng,
                      session=0, index=0) -> Impression:
    """Pixel ``p`` of the impression shows master point ``T^-1(p + d(p))``
    where ``d`` is the optional elastic field, so a master pore ``q`` lands
    at the solution of ``p = T(q) - d(p)``."""
    h, w = cfg.size
    rr, cc = np.mgrid[0:h, 0:w]
    disp = elastic_field((h, w), cfg.elastic, cfg.elastic_scale, rng)
    grid = np.stack([(rr + disp[0]).ravel(), (cc + disp[1]).ravel()], 1)
    src = T.inverse().apply(grid)
    if master.ridge is not None and cfg.pressure:
        bias = rng.standard_normal() * cfg.pressure
        v = bilinear_sample(master.ridge, src[:, 0], src[:, 1]).reshape(h, w)
        inside = bilinear_sample(np.ones_like(master.ridge), src[:, 0], src[:, 1]).reshape(h, w)
        mid = 0.5 * (cfg.ridge_level + cfg.valley_level)
        amp = 0.5 * (cfg.valley_level - cfg.ridge_level)
        img = (mid + amp * np.clip(v + bias, -1, 1)) * inside
    else:
        img = bilinear_sample(master.base, src[:, 0], src[:, 1]).reshape(h, w)
    img = img.astype(np.float64)
    proj = T.apply(master.pores)
    if cfg.elastic > 0:
        target = proj.copy()
        for _ in range(5):
            d_r = bilinear_sample(disp[0], proj[:, 0], proj[:, 1])
            d_c = bilinear_sample(disp[1], proj[:, 0], proj[:, 1])
            proj = target - np.stack([d_r, d_c], 1)
    proj = proj + clipped_jitter(len(master.pores), cfg.jitter, rng)
    amps = master.amplitudes.copy()
    if cfg.amplitude_jitter:
        amps *= np.clip(1 + cfg.amplitude_jitter * rng.standard_normal(len(amps)), 0.2, 2)
    visible = np.ones(len(proj), bool)
    if cfg.pore_dropout:
        visible = rng.random(len(proj)) >= cfg.pore_dropout
    render_pores(img, proj[visible], master.radii[visible], amps[visible])
    if cfg.contrast_jitter or cfg.brightness_jitter:
        a = 1 + cfg.contrast_jitter * rng.standard_normal()
        b = cfg.brightness_jitter * rng.standard_normal()
        img = (img - 0.5) * a + 0.5 + b
    if cfg.noise:
        img += rng.standard_normal((h, w)) * cfg.noise
    keep = visible & (proj[:, 0] >= 0) & (proj[:, 0] <= h - 1) & (proj[:, 1] >= 0) \
        & (proj[:, 1] <= w - 1)
    ids = np.nonzero(keep)[0]
    return Impression(np.clip(img, 0, 1).astype(np.float32), T, proj[ids], ids, session, index)


def gen_subject(cfg: SynthConfig, rng) -> SynthSubject:
    if cfg.sessions < 1:
        raise ValueError("sessions must be >= 1")
    master = gen_master(cfg, rng)
    subject = SynthSubject(master)
    for s in range(cfg.sessions):
        for i in range(cfg.per_session):
            T = sample_transform(cfg, rng)
            subject.impressions.append(render_impression(master, T, cfg, rng, s, i))
    return subject


def gen_detection_set(n_images, cfg: SynthConfig, rng):
    """Independent single impressions for detector experiments:
    ``[(image, ground_truth), ...]``."""
    cfg = replace(cfg, sessions=1, per_session=1)
    out = []
    for _ in range(n_images):
        imp = gen_subject(cfg, rng).impressions[0]
        out.append((imp.image, imp.pores))
    return out
