"""Iterative rigid alignment of same-finger images and automatic pore
identity annotation.

Transforms returned by the aligner map image-2 coordinates into the image-1
frame: ``p1 ~ T(p2)``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .handcrafted import descriptor_distances, match_distance_matrix, sift_describe
from .imgproc import RigidTransform, enhance, extract_patches

log = logging.getLogger(__name__)

ANNOTATION_PATCH = 33


class DegenerateConfigurationError(ValueError):
    pass


class AlignmentFailedError(RuntimeError):
    pass


@dataclass
class AlignmentConfig:
    weight: float = 500.0        # lambda
    eps: float = 1e-5
    max_iterations: int = 10
    sift_ratio: float = 0.8
    sift_scale: float = 8.0


@dataclass
class AlignmentState:
    iteration: int
    transform: RigidTransform
    mse: float
    matches: list            # (index in pores1, index in pores2)
    history: list = field(default_factory=list)   # mse per iteration


def horn_align(P, Q) -> RigidTransform:
    """Closed-form rigid transform minimising ``sum |P_k - T(Q_k)|^2``."""
    P = np.asarray(P, np.float64).reshape(-1, 2)
    Q = np.asarray(Q, np.float64).reshape(-1, 2)
    if len(P) != len(Q):
        raise ValueError("point sets must be index-aligned")
    if len(P) < 2:
        raise DegenerateConfigurationError("need at least two correspondences")
    pc = P.mean(axis=0)
    qc = Q.mean(axis=0)
    p = P - pc
    q = Q - qc
    if np.all(np.abs(q) < 1e-12) or np.all(np.abs(p) < 1e-12):
        raise DegenerateConfigurationError("all points coincide")
    dot = float((p * q).sum())
    cross = float((p[:, 1] * q[:, 0] - p[:, 0] * q[:, 1]).sum())
    angle = math.atan2(cross, dot)
    c, s = math.cos(angle), math.sin(angle)
    t = pc - np.array([c * qc[0] - s * qc[1], s * qc[0] + c * qc[1]])
    return RigidTransform(angle, float(t[0]), float(t[1]))


def mean_squared_residual(P, Q, T: RigidTransform) -> float:
    P = np.asarray(P, np.float64).reshape(-1, 2)
    if not len(P):
        return 0.0
    return float(((P - T.apply(Q)) ** 2).sum(axis=1).mean())


def combined_distance(d_sift, p1, p2, T: RigidTransform, w, cfg: AlignmentConfig = None):
    """Descriptor distance plus the weighted squared distance of the pores in
    aligned space, ``d + lambda / (w + eps) * |p1 - T(p2)|^2``. Works on
    scalars or on a full ``(len(p1), len(p2))`` matrix of descriptor
    distances."""
    cfg = cfg or AlignmentConfig()
    p1 = np.asarray(p1, np.float64)
    p2 = np.asarray(p2, np.float64)
    coef = cfg.weight / (w + cfg.eps)
    if p1.ndim == 1:
        return float(d_sift + coef * ((p1 - T.apply(p2[None])[0]) ** 2).sum())
    tp2 = T.apply(p2)
    sq = ((p1[:, None, :] - tp2[None, :, :]) ** 2).sum(axis=2)
    return np.asarray(d_sift) + coef * sq


def inside(points, shape) -> np.ndarray:
    pts = np.asarray(points, np.float64).reshape(-1, 2)
    h, w = shape
    return (pts[:, 0] >= 0) & (pts[:, 0] <= h - 1) & (pts[:, 1] >= 0) & (pts[:, 1] <= w - 1)


def overlap_region(shape1, shape2, T: RigidTransform):
    """Predicate over image-1 points: inside image 1 and, mapped into image 2
    with ``T^-1``, inside image 2."""
    inv = T.inverse()

    def contains(points):
        return inside(points, shape1) & inside(inv.apply(np.asarray(points, np.float64)
                                                         .reshape(-1, 2)), shape2)
    return contains


def overlap_region2(shape1, shape2, T: RigidTransform):
    """The same overlap seen from image 2: points of image 2 whose image
    under ``T`` lies inside image 1."""
    def contains(points):
        pts = np.asarray(points, np.float64).reshape(-1, 2)
        return inside(pts, shape2) & inside(T.apply(pts), shape1)
    return contains


def _solve(pores1, pores2, matches):
    P = pores1[[i for i, _ in matches]]
    Q = pores2[[j for _, j in matches]]
    T = horn_align(P, Q)
    return T, mean_squared_residual(P, Q, T)


def align_pair(img1, img2, pores1, pores2, cfg: AlignmentConfig = None,
               descriptors=None) -> AlignmentState:
    """Aligns image 2 onto image 1.

    Iteration 0 matches SIFT descriptors with the mutual ratio test. Each
    later iteration keeps only pores inside the current overlap and
    re-matches under the combined descriptor/spatial distance, then re-solves
    the absolute orientation problem. Stops when the correspondence set no
    longer changes or after ``max_iterations``.

    ``img1``/``img2`` are expected to be enhanced already. ``descriptors``
    may supply precomputed ``(desc1, desc2)`` arrays.
    """
    cfg = cfg or AlignmentConfig()
    p1 = np.asarray(pores1, np.float64).reshape(-1, 2)
    p2 = np.asarray(pores2, np.float64).reshape(-1, 2)
    if len(p1) < 2 or len(p2) < 2:
        raise AlignmentFailedError("need at least two pores in each image")
    if descriptors is None:
        d1 = sift_describe(img1, p1, cfg.sift_scale).vectors
        d2 = sift_describe(img2, p2, cfg.sift_scale).vectors
    else:
        d1, d2 = descriptors
    dsift = descriptor_distances(d1, d2)
    matches = [(i, j) for i, j, _ in match_distance_matrix(dsift, cfg.sift_ratio)]
    if len(matches) < 2:
        raise AlignmentFailedError(f"only {len(matches)} initial correspondences")
    try:
        T, w = _solve(p1, p2, matches)
    except DegenerateConfigurationError as exc:
        raise AlignmentFailedError(str(exc)) from exc
    state = AlignmentState(0, T, w, matches, [w])
    shape1, shape2 = np.shape(img1), np.shape(img2)
    for it in range(1, cfg.max_iterations + 1):
        keep1 = np.nonzero(overlap_region(shape1, shape2, state.transform)(p1))[0]
        keep2 = np.nonzero(overlap_region2(shape1, shape2, state.transform)(p2))[0]
        if len(keep1) < 2 or len(keep2) < 2:
            break
        dist = combined_distance(dsift[np.ix_(keep1, keep2)], p1[keep1], p2[keep2],
                                 state.transform, state.mse, cfg)
        new = [(int(keep1[i]), int(keep2[j]))
               for i, j, _ in match_distance_matrix(dist, cfg.sift_ratio)]
        if len(new) < 2:
            break
        if sorted(new) == sorted(state.matches):
            break
        try:
            T, w = _solve(p1, p2, new)
        except DegenerateConfigurationError:
            break
        state = AlignmentState(it, T, w, new, state.history + [w])
    return state


# --- annotation -----------------------------------------------------------

@dataclass
class AnnotatedPatchSet:
    patches: np.ndarray      # (K, 33, 33) float32
    labels: np.ndarray       # (K,) int64, unique pore identity
    subjects: np.ndarray     # (K,) int64
    sources: np.ndarray      # (K,) int64, image index within the subject
    centers: np.ndarray = None   # (K, 2) patch centres in their own image

    def __post_init__(self):
        self.labels = np.asarray(self.labels, np.int64)
        self.subjects = np.asarray(self.subjects, np.int64)
        self.sources = np.asarray(self.sources, np.int64)
        if not (len(self.patches) == len(self.labels) == len(self.subjects) == len(self.sources)):
            raise ValueError("patch set arrays must have equal length")
        if len(self.labels):
            _, counts = np.unique(self.labels, return_counts=True)
            if counts.min() < 2:
                raise ValueError("every identity needs at least two patches")
            for lab in np.unique(self.labels):
                if len(np.unique(self.subjects[self.labels == lab])) != 1:
                    raise ValueError(f"identity {lab} spans several subjects")

    def __len__(self):
        return len(self.labels)

    @property
    def identities(self):
        return np.unique(self.labels)

    @classmethod
    def concat(cls, sets):
        sets = [s for s in sets if len(s)]
        if not sets:
            return cls(np.zeros((0, ANNOTATION_PATCH, ANNOTATION_PATCH), np.float32),
                       [], [], [], np.zeros((0, 2)))
        return cls(np.concatenate([s.patches for s in sets]),
                   np.concatenate([s.labels for s in sets]),
                   np.concatenate([s.subjects for s in sets]),
                   np.concatenate([s.sources for s in sets]),
                   np.concatenate([s.centers for s in sets]))

    def save(self, path, metadata=None):
        from .nn import container
        meta = dict(metadata or {})
        for subj in np.unique(self.subjects):
            labs = self.labels[self.subjects == subj]
            meta[f"subject.{subj}"] = f"{labs.min()}-{labs.max()}"
        container.save(path, {"patches": self.patches, "labels": self.labels,
                              "subjects": self.subjects, "sources": self.sources,
                              "centers": self.centers}, meta)

    @classmethod
    def load(cls, path):
        from .nn import container
        t, _ = container.load(path)
        return cls(t["patches"], t["labels"].astype(np.int64),
                   t["subjects"].astype(np.int64), t["sources"].astype(np.int64),
                   t["centers"].astype(np.float64))


def annotate_subject(images, pores, subject_id, first_label=0,
                     cfg: AlignmentConfig = None, enhanced=None):
    """Builds identity-labelled patches for one subject.

    Every image is aligned to image 0. Pores of image 0 whose projections fall
    inside every aligned image get one label and a 33x33 patch from each
    image (bilinear at the projected coordinate). Images that fail to align
    are skipped. Returns ``(patch_set, transforms)`` where ``transforms[k]``
    maps image-k coordinates into image 0, or ``None`` for skipped images.
    """
    cfg = cfg or AlignmentConfig()
    enhanced = enhanced or [enhance(img) for img in images]
    transforms = [RigidTransform.identity()]
    ref = np.asarray(pores[0], np.float64).reshape(-1, 2)
    for k in range(1, len(images)):
        try:
            st = align_pair(enhanced[0], enhanced[k], ref, pores[k], cfg)
            transforms.append(st.transform)
        except AlignmentFailedError as exc:
            log.warning("subject %s image %d skipped: %s", subject_id, k, exc)
            transforms.append(None)
    used = [k for k, T in enumerate(transforms) if T is not None]
    empty = AnnotatedPatchSet.concat([])
    if len(used) < 2 or not len(ref):
        log.warning("subject %s has fewer than two alignable images", subject_id)
        return empty, transforms
    keep = inside(ref, np.shape(images[0]))
    projected = {}
    for k in used:
        proj = transforms[k].inverse().apply(ref)
        projected[k] = proj
        keep &= inside(proj, np.shape(images[k]))
    idx = np.nonzero(keep)[0]
    if not len(idx):
        return empty, transforms
    labels = first_label + np.arange(len(idx))
    patches, labs, srcs, centers = [], [], [], []
    for k in used:
        c = projected[k][idx]
        patches.append(extract_patches(images[k], c, ANNOTATION_PATCH))
        labs.append(labels)
        srcs.append(np.full(len(idx), k))
        centers.append(c)
    order = np.argsort(np.concatenate(labs), kind="stable")
    out = AnnotatedPatchSet(np.concatenate(patches)[order], np.concatenate(labs)[order],
                            np.full(len(order), subject_id), np.concatenate(srcs)[order],
                            np.concatenate(centers)[order])
    return out, transforms


def build_identity_dataset(subjects, detect=None, cfg: AlignmentConfig = None):
    """Annotates several subjects with globally unique labels.

    ``subjects`` maps subject id to a list of images, or to a list of
    ``(image, pores)`` pairs when pores are already known; otherwise
    ``detect(image)`` supplies them. Subjects are numbered in iteration order.
    """
    cfg = cfg or AlignmentConfig()
    sets = []
    next_label = 0
    for number, sid in enumerate(subjects):
        entries = subjects[sid]
        if entries and isinstance(entries[0], tuple):
            images = [e[0] for e in entries]
            pores = [np.asarray(e[1], np.float64).reshape(-1, 2) for e in entries]
        else:
            if detect is None:
                raise ValueError("pores not given and no detector supplied")
            images = list(entries)
            pores = [detect(img) for img in images]
        if len(images) < 2:
            log.warning("subject %s has a single image; skipped", sid)
            continue
        ps, _ = annotate_subject(images, pores, number, next_label, cfg)
        if len(ps):
            next_label = int(ps.labels.max()) + 1
            sets.append(ps)
    return AnnotatedPatchSet.concat(sets)
