"""Verification by correspondence counting, the genuine/impostor protocol,
and ROC/EER computation."""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .handcrafted import dp_describe, match_ratio_mutual, sift_describe
from .imgproc import as_image, enhance

log = logging.getLogger(__name__)

BACKENDS = ("learned", "sift", "dp")


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ImageId:
    subject: str
    session: int
    index: int

    def __str__(self):
        return f"{self.subject}_{self.session}_{self.index}"


@dataclass
class ProtocolPairs:
    genuine: list
    impostor: list


@dataclass
class RocCurve:
    points: list          # (threshold, far, frr)
    eer: float


def match_fingerprints(desc1, desc2, ratio=0.7) -> int:
    """Number of mutual ratio-test correspondences."""
    a = np.asarray(desc1)
    b = np.asarray(desc2)
    if len(a) and len(b) and a.shape[1] != b.shape[1]:
        raise ValueError(f"descriptor dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    return len(match_ratio_mutual(a, b, ratio))


def gen_protocol(ids) -> ProtocolPairs:
    """Genuine pairs: every first-session image against every second-session
    image of the same subject. Impostor pairs: the first image of the first
    session of each subject against the first image of the second session of
    every other subject (ordered). Sessions are ranked per subject, so the
    two lowest session numbers play the roles of first and second."""
    by_subject = {}
    for i in ids:
        by_subject.setdefault(i.subject, {}).setdefault(i.session, []).append(i)
    first = {}
    genuine = []
    for subj in by_subject:
        sessions = sorted(by_subject[subj])
        if len(sessions) < 2:
            log.warning("subject %s has a single session; excluded", subj)
            continue
        s1 = sorted(by_subject[subj][sessions[0]], key=lambda i: i.index)
        s2 = sorted(by_subject[subj][sessions[1]], key=lambda i: i.index)
        genuine += [(a, b) for a in s1 for b in s2]
        first[subj] = (s1[0], s2[0])
    impostor = [(first[s][0], first[t][1]) for s in first for t in first if s != t]
    return ProtocolPairs(genuine, impostor)


def roc_eer(genuine_scores, impostor_scores, thresholds=None) -> RocCurve:
    """FAR(t) = share of impostor scores >= t, FRR(t) = share of genuine
    scores < t, swept over integer thresholds spanning the observed scores
    (plus one past the maximum) unless ``thresholds`` is given. The EER is
    read where FAR - FRR changes sign, interpolating linearly between the
    two bracketing thresholds."""
    g = np.asarray(genuine_scores, np.float64).ravel()
    i = np.asarray(impostor_scores, np.float64).ravel()
    if not len(g) or not len(i):
        raise ValueError("genuine and impostor score lists must be non-empty")
    if thresholds is None:
        lo = int(np.floor(min(g.min(), i.min())))
        hi = int(np.ceil(max(g.max(), i.max())))
        thresholds = np.arange(lo, hi + 2, dtype=np.float64)
    else:
        thresholds = np.unique(np.asarray(thresholds, np.float64))
        thresholds = np.append(thresholds, np.inf)
    gs = np.sort(g)
    im = np.sort(i)
    far = (len(im) - np.searchsorted(im, thresholds, side="left")) / len(im)
    frr = np.searchsorted(gs, thresholds, side="left") / len(gs)
    diff = far - frr
    # diff is non-increasing from >= 0 at the lowest threshold to <= 0 past the top
    k = int(np.argmax(diff <= 0))
    if diff[k] == 0 or k == 0:
        eer = float(far[k] if diff[k] == 0 else (far[k] + frr[k]) / 2)
    else:
        a = diff[k - 1] / (diff[k - 1] - diff[k])
        eer = float(far[k - 1] + a * (far[k] - far[k - 1]))
    points = [(float(t), float(f), float(r)) for t, f, r in zip(thresholds, far, frr)]
    return RocCurve(points, eer)


def image_hash(img) -> str:
    return hashlib.sha256(np.ascontiguousarray(as_image(img), np.float32).tobytes()).hexdigest()


def model_hash(model) -> str:
    h = hashlib.sha256()
    for k, v in sorted(model.state().items()):
        h.update(k.encode())
        h.update(np.ascontiguousarray(v, np.float32).tobytes())
    return h.hexdigest()


@dataclass
class DetectionCache:
    """Pore detections keyed by (image hash, detector hash, p_t, i_t)."""
    entries: dict = field(default_factory=dict)

    def get(self, img, detect, key_extra):
        key = (image_hash(img),) + tuple(key_extra)
        if key not in self.entries:
            self.entries[key] = np.asarray(detect(img), np.float64).reshape(-1, 2)
        return self.entries[key]


def describe(img, pores, backend, model=None, sift_scale=8.0):
    if backend == "learned":
        if model is None:
            raise ConfigurationError("the learned backend needs a descriptor model")
        from .descnet import describe_pores
        return describe_pores(img, pores, model)
    if backend == "sift":
        return sift_describe(enhance(img), pores, sift_scale).vectors
    if backend == "dp":
        return dp_describe(img, pores).vectors
    raise ConfigurationError(f"unknown backend {backend!r}")


@dataclass
class RecognitionResult:
    scores: list          # (id_a, id_b, "genuine"|"impostor", score)
    roc: RocCurve

    @property
    def eer(self):
        return self.roc.eer


def run_recognition_experiment(images, pores, backend, model=None, ratio=0.7,
                               protocol: ProtocolPairs = None) -> RecognitionResult:
    """Scores every protocol pair with one descriptor backend.

    ``images`` and ``pores`` map :class:`ImageId` to an image and to its
    detections; passing the same ``pores`` to every backend keeps the
    comparison controlled.
    """
    protocol = protocol or gen_protocol(sorted(images, key=lambda i: (i.subject, i.session,
                                                                       i.index)))
    needed = sorted({i for pair in protocol.genuine + protocol.impostor for i in pair},
                    key=lambda i: (i.subject, i.session, i.index))
    desc = {i: describe(images[i], pores[i], backend, model) for i in needed}
    rows = []
    for label, pairs in (("genuine", protocol.genuine), ("impostor", protocol.impostor)):
        for a, b in pairs:
            rows.append((str(a), str(b), label, match_fingerprints(desc[a], desc[b], ratio)))
    g = [r[3] for r in rows if r[2] == "genuine"]
    i = [r[3] for r in rows if r[2] == "impostor"]
    return RecognitionResult(rows, roc_eer(g, i))


def write_scores(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id_a", "id_b", "label", "score"])
        w.writerows(rows)


def read_scores(path):
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        next(r)
        return [(a, b, lab, int(s)) for a, b, lab, s in r]


def write_roc(roc: RocCurve, path) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        fh.write("threshold,far,frr\n")
        for t, f, r in roc.points:
            fh.write(f"{t:g},{f:.6f},{r:.6f}\n")
        fh.write(f"eer,{roc.eer:.6f}\n")
