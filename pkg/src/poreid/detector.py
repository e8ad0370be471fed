"""Pore detection: a small fully convolutional network over 17x17 patches,
patch-sampled training with augmentation, and full-image inference with
thresholding and non-maximum suppression."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .imgproc import as_image, bilinear_sample, extract_patches

log = logging.getLogger(__name__)

PATCH = 17
HALF = PATCH // 2
ARCH_ID = "pore-detector-v1"


class InvalidDatasetError(ValueError):
    pass


@dataclass
class DetectorConfig:
    prob_threshold: float = 0.9
    nms_threshold: float = 0.1
    box_size: int = 7
    patch_size: int = PATCH
    label_box: int = 7


@dataclass
class AugmentationConfig:
    translation: float = 1.5              # px, per axis
    rotation: float = math.radians(10)    # rad
    brightness: float = 0.03              # additive, [0, 1] intensity scale
    contrast: float = 0.05                # multiplier is 1 + N(0, contrast)

    def __post_init__(self):
        if min(self.translation, self.rotation, self.brightness, self.contrast) < 0:
            raise ValueError("augmentation spreads must be non-negative")

    @classmethod
    def off(cls):
        return cls(0.0, 0.0, 0.0, 0.0)


@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 256
    base_lr: float = 0.1
    decay_factor: float = 0.96
    decay_every: int = 2000
    dropout: float = 0.5
    weight_decay: float = 0.0
    eval_every: int = 500
    patience: int = 10
    positive_fraction: float = 0.5
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)


@nn.register_architecture(ARCH_ID)
def build_detector(meta=None, dropout=0.5, rng=None) -> nn.Sequential:
    """conv3x3/32-relu-bn-pool, conv3x3/64-relu-bn-pool,
    conv3x3/128-relu-bn-pool, dropout, conv5x5/1-bn-sigmoid.
    All layers use valid padding and unit strides; convolutions carry no
    bias."""
    if meta:
        dropout = float(meta.get("dropout", dropout))
    layers = []
    cin = 1
    for i, f in enumerate((32, 64, 128), start=1):
        layers += [nn.Conv2D(f"conv{i}", 3, cin, f), nn.ReLU(f"relu{i}"),
                   nn.BatchNorm(f"bn{i}", f), nn.MaxPool2D(f"pool{i}", 3, 1)]
        cin = f
    layers += [nn.Dropout("dropout", dropout), nn.Conv2D("conv4", 5, cin, 1),
               nn.BatchNorm("bn4", 1), nn.Sigmoid("sigmoid")]
    model = nn.Sequential(layers, arch=ARCH_ID, metadata={
        "dropout": dropout, "bn_momentum": 0.9, "bn_eps": 1e-3})
    if rng is not None:
        model.init_weights(rng)
    return model


def probability_map(model, img, padded=True) -> np.ndarray:
    """Single inference pass. Returns the ``(M-16) x (N-16)`` map, or the
    same map zero-padded back to ``M x N`` when ``padded``."""
    img = as_image(img)
    m, n = img.shape
    if m < PATCH or n < PATCH:
        raise ValueError(f"image {img.shape} smaller than {PATCH}x{PATCH}")
    out = model.forward(img[None, :, :, None], train=False)[0, :, :, 0]
    if not padded:
        return out
    full = np.zeros((m, n), np.float32)
    full[HALF:m - HALF, HALF:n - HALF] = out
    return full


def label_patch(center, ground_truth, box=7) -> int:
    """1 when a ground-truth pore lies in the closed ``box x box`` square
    around ``center``."""
    gt = np.asarray(ground_truth, np.float64).reshape(-1, 2)
    if not len(gt):
        return 0
    r = box // 2
    d = np.abs(gt - np.asarray(center, np.float64))
    return int(np.any((d[:, 0] <= r) & (d[:, 1] <= r)))


def box_iou(a, b, size=7) -> float:
    """IoU of two ``size x size`` pixel squares centred at integer points."""
    dr = size - abs(a[0] - b[0])
    dc = size - abs(a[1] - b[1])
    if dr <= 0 or dc <= 0:
        return 0.0
    inter = dr * dc
    return inter / (2 * size * size - inter)


def nms(centers, probs, iou_threshold, size=7):
    """Greedy non-maximum suppression over ``size x size`` boxes.

    Boxes are visited by descending probability, ties broken by (row, col).
    Returns the kept indices in visiting order.
    """
    centers = np.asarray(centers, np.float64).reshape(-1, 2)
    probs = np.asarray(probs, np.float64)
    if not len(centers):
        return np.zeros(0, np.int64)
    order = np.lexsort((centers[:, 1], centers[:, 0], -probs))
    suppressed = np.zeros(len(order), bool)
    keep = []
    oc = centers[order]
    for pos in range(len(order)):
        if suppressed[pos]:
            continue
        keep.append(order[pos])
        rest = np.arange(pos + 1, len(order))
        rest = rest[~suppressed[rest]]
        if not len(rest):
            continue
        dr = np.clip(size - np.abs(oc[rest, 0] - oc[pos, 0]), 0, None)
        dc = np.clip(size - np.abs(oc[rest, 1] - oc[pos, 1]), 0, None)
        inter = dr * dc
        iou = inter / (2 * size * size - inter)
        suppressed[rest[iou > iou_threshold]] = True
    return np.asarray(keep, np.int64)


@dataclass
class Detection:
    row: int
    col: int
    probability: float

    @property
    def center(self):
        return (self.row, self.col)


def detections_from_map(prob, cfg: DetectorConfig = None):
    """Thresholds a padded probability map (strictly above ``p_t``) and
    merges candidates with NMS. Sorted by probability, descending."""
    cfg = cfg or DetectorConfig()
    rows, cols = np.nonzero(prob > cfg.prob_threshold)
    centers = np.stack([rows, cols], axis=1)
    probs = prob[rows, cols]
    keep = nms(centers, probs, cfg.nms_threshold, cfg.box_size)
    return [Detection(int(rows[k]), int(cols[k]), float(probs[k])) for k in keep]


def detect_pores(img, model, cfg: DetectorConfig = None):
    return detections_from_map(probability_map(model, img), cfg)


def detection_points(dets) -> np.ndarray:
    return np.asarray([d.center for d in dets], np.float64).reshape(-1, 2)


@dataclass
class DetectionReport:
    true_positives: int
    n_detections: int
    n_ground_truth: int
    tdr: float
    fdr: float
    f_score: float
    degenerate: bool = False

    def as_text(self) -> str:
        return (f"tp={self.true_positives}\ntdr={self.tdr:.6f}\nfdr={self.fdr:.6f}\n"
                f"fscore={self.f_score:.6f}\n")


def _nearest(src, dst):
    """Index of the nearest ``dst`` point for every ``src`` point; equal
    distances resolve to the lexicographically smallest ``dst`` point."""
    order = np.lexsort((dst[:, 1], dst[:, 0]))
    d = ((src[:, None, :] - dst[None, order, :]) ** 2).sum(axis=2)
    return order[d.argmin(axis=1)]


def mutual_nearest_pairs(D, G):
    """Pairs ``(i, j)`` where ``G[j]`` is the nearest ground truth of
    ``D[i]`` and ``D[i]`` the nearest detection of ``G[j]``."""
    D = np.asarray(D, np.float64).reshape(-1, 2)
    G = np.asarray(G, np.float64).reshape(-1, 2)
    if not len(D) or not len(G):
        return []
    d2g = _nearest(D, G)
    g2d = _nearest(G, D)
    return [(i, int(j)) for i, j in enumerate(d2g) if g2d[j] == i]


def _rates(tp, n_det, n_gt):
    degenerate = n_det == 0 or n_gt == 0
    tdr = tp / n_gt if n_gt else 0.0
    fdr = (n_det - tp) / n_det if n_det else 0.0
    precision = 1 - fdr if n_det else 0.0
    f = 2 * precision * tdr / (precision + tdr) if precision + tdr > 0 else 0.0
    return tdr, fdr, f, degenerate


def evaluate_detection(D, G) -> DetectionReport:
    """True detections are those mutually nearest to a ground-truth pore;
    there is no distance cut-off."""
    D = np.asarray(D, np.float64).reshape(-1, 2)
    G = np.asarray(G, np.float64).reshape(-1, 2)
    tp = len(mutual_nearest_pairs(D, G))
    tdr, fdr, f, deg = _rates(tp, len(D), len(G))
    return DetectionReport(tp, len(D), len(G), tdr, fdr, f, deg)


def pooled_report(reports) -> DetectionReport:
    """Aggregates per-image reports by summing the counts."""
    tp = sum(r.true_positives for r in reports)
    nd = sum(r.n_detections for r in reports)
    ng = sum(r.n_ground_truth for r in reports)
    tdr, fdr, f, deg = _rates(tp, nd, ng)
    return DetectionReport(tp, nd, ng, tdr, fdr, f, deg)


# --- training -----------------------------------------------------------

def sample_augmentations(n, aug: AugmentationConfig, rng):
    """Per-sample ``(dy, dx, angle, brightness, contrast)``, shape ``(n, 5)``;
    components are independent normals."""
    z = rng.standard_normal((n, 5))
    out = np.empty((n, 5))
    out[:, 0] = z[:, 0] * aug.translation
    out[:, 1] = z[:, 1] * aug.translation
    out[:, 2] = z[:, 2] * aug.rotation
    out[:, 3] = z[:, 3] * aug.brightness
    out[:, 4] = 1 + z[:, 4] * aug.contrast
    return out


def augment_patches(patches, params) -> np.ndarray:
    """Applies per-patch rigid motions about the patch centre (zero-padded,
    bilinear) and then ``contrast * x + brightness``, clipped to [0, 1].
    ``params`` rows are ``(dy, dx, angle, brightness, contrast)``."""
    patches = np.asarray(patches, np.float32)
    b, h, w = patches.shape
    params = np.asarray(params, np.float64).reshape(b, 5)
    if not np.any(params[:, :3]) and np.all(params[:, 3] == 0) and np.all(params[:, 4] == 1):
        return patches.copy()
    ch, cw = (h - 1) / 2, (w - 1) / 2
    rr, cc = np.mgrid[0:h, 0:w]
    rr = rr - ch
    cc = cc - cw
    out = np.empty_like(patches)
    for k in range(b):
        dy, dx, ang, bright, contrast = params[k]
        # inverse map: output pixel p reads source at R^-1 (p - t)
        cs, sn = math.cos(ang), math.sin(ang)
        pr = rr - dy
        pc = cc - dx
        sr = cs * pr + sn * pc + ch
        sc = -sn * pr + cs * pc + cw
        warped = bilinear_sample(patches[k], sr, sc)
        out[k] = np.clip(contrast * warped + bright, 0, 1)
    return out


def sample_training_batch(images, ground_truths, batch_size, aug, rng,
                          positive_fraction=0.5, label_box=7, return_params=False):
    """Draws ``batch_size`` independent 17x17 patches.

    A ``positive_fraction`` share is centred within the label box of a random
    ground-truth pore; the rest are uniform over valid centres. Labels are
    those of the untransformed crop.
    """
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    have_pores = [i for i, g in enumerate(ground_truths) if len(g)]
    if not have_pores:
        raise InvalidDatasetError("no positive examples in the training images")
    r = label_box // 2
    n_pos = int(round(batch_size * positive_fraction))
    centers = np.empty((batch_size, 2), np.int64)
    which = np.empty(batch_size, np.int64)
    for k in range(batch_size):
        if k < n_pos:
            i = have_pores[rng.integers(len(have_pores))]
            g = ground_truths[i]
            pore = np.rint(g[rng.integers(len(g))]).astype(np.int64)
            c = pore + rng.integers(-r, r + 1, size=2)
        else:
            i = int(rng.integers(len(images)))
            h, w = images[i].shape
            c = np.array([rng.integers(HALF, h - HALF), rng.integers(HALF, w - HALF)])
        which[k] = i
        centers[k] = c
    patches = np.empty((batch_size, PATCH, PATCH), np.float32)
    labels = np.empty(batch_size, np.float32)
    for k in range(batch_size):
        i = which[k]
        patches[k] = extract_patches(images[i], centers[k][None], PATCH)[0]
        labels[k] = label_patch(centers[k], ground_truths[i], label_box)
    params = sample_augmentations(batch_size, aug, rng)
    patches = augment_patches(patches, params)
    out = (patches[..., None], labels)
    if return_params:
        out += (params, centers, which)
    return out


def validation_fscore(model, images, ground_truths, threshold=0.5):
    """F-score without post-processing: every site above ``threshold`` is a
    detection, matched by the mutual-nearest-neighbour rule."""
    reports = []
    for img, gt in zip(images, ground_truths):
        prob = probability_map(model, img)
        rows, cols = np.nonzero(prob > threshold)
        reports.append(evaluate_detection(np.stack([rows, cols], 1), gt))
    return pooled_report(reports).f_score


def train_detector(train_images, train_gt, val_images, val_gt, cfg: TrainConfig = None,
                   rng=None, model=None, log_every=100):
    """SGD on sigmoid cross-entropy with early stopping on validation
    F-score. Returns ``(best_model, log)`` where ``log`` is a list of
    ``(step, loss)`` and ``("val", step, fscore)`` records."""
    cfg = cfg or TrainConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    train_images = [as_image(i) for i in train_images]
    if model is None:
        model = build_detector(dropout=cfg.dropout, rng=rng)
    opt = nn.SGD(cfg.base_lr, cfg.decay_factor, cfg.decay_every, cfg.weight_decay)
    history = []
    best = (-1.0, None, 0)
    bad = 0
    for step in range(1, cfg.steps + 1):
        x, y = sample_training_batch(train_images, train_gt, cfg.batch_size,
                                     cfg.augmentation, rng, cfg.positive_fraction)
        logits = model.forward(x, train=True, rng=rng, stop_before="sigmoid")
        loss, dlogits, _ = nn.sigmoid_cross_entropy(logits, y)
        if not math.isfinite(loss):
            raise nn.NonFiniteGradientError(f"non-finite loss at step {step}")
        model.backward(dlogits)
        nn.sgd_step(model, opt)
        history.append((step, loss))
        if log_every and step % log_every == 0:
            log.info("detector step %d loss %.4f lr %.4g", step, loss, opt.lr())
        if val_images and (step % cfg.eval_every == 0 or step == cfg.steps):
            f = validation_fscore(model, val_images, val_gt)
            history.append(("val", step, f))
            log.info("detector step %d validation F %.4f", step, f)
            if f > best[0]:
                best = (f, model.clone(), step)
                bad = 0
            else:
                bad += 1
                if bad >= cfg.patience:
                    break
    final = best[1] if best[1] is not None else model
    final.metadata.update({"train_steps": opt.step, "best_step": best[2],
                           "base_lr": cfg.base_lr, "decay": cfg.decay_factor,
                           "decay_every": cfg.decay_every, "batch_size": cfg.batch_size})
    return final, history


def grid_search_thresholds(model, images, ground_truths, p_grid=None, i_grid=None):
    """Chooses ``(p_t, i_t)`` maximising pooled validation F-score. Ties keep
    the first pair in grid order."""
    p_grid = p_grid or [round(0.1 * k, 1) for k in range(1, 10)]
    i_grid = i_grid or [round(0.1 * k, 1) for k in range(1, 8)]
    maps = [probability_map(model, img) for img in images]
    best = None
    for p in p_grid:
        for i in i_grid:
            cfg = DetectorConfig(prob_threshold=p, nms_threshold=i)
            reps = [evaluate_detection(detection_points(detections_from_map(m, cfg)), g)
                    for m, g in zip(maps, ground_truths)]
            f = pooled_report(reps).f_score
            if best is None or f > best[0]:
                best = (f, p, i)
    return best[1], best[2], best[0]


def write_detections(dets, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in dets:
            fh.write(f"{d.row} {d.col} {d.probability:.6f}\n")


def read_detections(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if parts:
                out.append(Detection(int(parts[0]), int(parts[1]), float(parts[2])))
    return out
