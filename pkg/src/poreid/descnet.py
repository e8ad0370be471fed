"""Learned pore descriptor: a HardNet-shaped CNN over 32x32 patches that
outputs unit-norm 128-d embeddings, trained with triplet semi-hard loss."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .aligner import ANNOTATION_PATCH, AnnotatedPatchSet
from .detector import AugmentationConfig, augment_patches, sample_augmentations
from .imgproc import as_image, extract_patches

log = logging.getLogger(__name__)

ARCH_ID = "pore-descnet-v1"
INPUT = 32
EMBEDDING = 128


class InvalidDatasetError(ValueError):
    pass


@dataclass
class DescNetConfig:
    batch_size: int = 252
    per_identity: int = 6
    margin: float = 2.0
    dropout: float = 0.3
    base_lr: float = 0.1
    weight_decay: float = 0.0
    steps: int = 3000
    eval_every: int = 100
    patience: int = 10
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        if self.per_identity < 2 or self.batch_size % self.per_identity:
            raise ValueError("batch_size must be a multiple of per_identity >= 2")

    @property
    def identities_per_batch(self):
        return self.batch_size // self.per_identity


@nn.register_architecture(ARCH_ID)
def build_descnet(meta=None, dropout=0.3, rng=None) -> nn.Sequential:
    """conv3x3/32, conv3x3/32, conv3x3/64 stride 2, conv3x3/64,
    conv3x3/128 stride 2, conv3x3/128 (each same-padded, then bn and relu),
    dropout, conv8x8/128 valid, bn, L2 normalisation. Bias-free."""
    if meta:
        dropout = float(meta.get("dropout", dropout))
    plan = [(32, 1), (32, 1), (64, 2), (64, 1), (128, 2), (128, 1)]
    layers = []
    cin = 1
    for i, (f, s) in enumerate(plan, start=1):
        layers += [nn.Conv2D(f"conv{i}", 3, cin, f, stride=s, padding="same"),
                   nn.BatchNorm(f"bn{i}", f), nn.ReLU(f"relu{i}")]
        cin = f
    layers += [nn.Dropout("dropout", dropout), nn.Conv2D("conv7", 8, cin, EMBEDDING),
               nn.BatchNorm("bn7", EMBEDDING), nn.L2Normalize("l2")]
    model = nn.Sequential(layers, arch=ARCH_ID, metadata={
        "dropout": dropout, "bn_momentum": 0.9, "bn_eps": 1e-3,
        "input": "raw patch, per-patch standardised"})
    if rng is not None:
        model.init_weights(rng)
    return model


def standardize(patches) -> np.ndarray:
    """Zero mean, unit std per patch (constant patches map to zeros)."""
    p = np.asarray(patches, np.float32)
    axes = tuple(range(1, p.ndim))
    mu = p.mean(axis=axes, keepdims=True)
    sd = p.std(axis=axes, keepdims=True)
    return np.divide(p - mu, sd, out=np.zeros_like(p), where=sd > 1e-6)


def crop32(patches) -> np.ndarray:
    """33x33 patches with the last row and column dropped."""
    return np.asarray(patches, np.float32)[:, :INPUT, :INPUT]


def embed(model, patches, batch=256) -> np.ndarray:
    """Infer-mode embeddings of ``(K, 32, 32)`` raw patches."""
    patches = np.asarray(patches, np.float32)
    out = np.zeros((len(patches), EMBEDDING), np.float32)
    for s in range(0, len(patches), batch):
        x = standardize(patches[s:s + batch])[..., None]
        out[s:s + batch] = model.forward(x, train=False)
    return out


def describe_pores(img, pores, model) -> np.ndarray:
    """One embedding per pore from the raw image's 33x33 patch cropped to
    32x32."""
    pts = np.asarray(pores, np.float64).reshape(-1, 2)
    if not len(pts):
        return np.zeros((0, EMBEDDING), np.float32)
    patches = extract_patches(as_image(img), pts, ANNOTATION_PATCH)
    return embed(model, crop32(patches))


def sample_identity_batch(dataset: AnnotatedPatchSet, cfg: DescNetConfig, aug, rng,
                          return_params=False):
    """``identities_per_batch`` distinct identities, ``per_identity`` patches
    each (drawn with replacement when an identity has fewer), cropped to
    32x32 and augmented. Returns ``(patches (B,32,32,1), labels (B,))``."""
    ids, starts, counts = np.unique(dataset.labels, return_index=True, return_counts=True)
    n_id = cfg.identities_per_batch
    if len(ids) < n_id:
        raise InvalidDatasetError(f"need {n_id} identities, dataset has {len(ids)}")
    order = np.argsort(dataset.labels, kind="stable")
    chosen = np.sort(rng.choice(len(ids), n_id, replace=False))
    rows = []
    for c in chosen:
        members = order[starts[c]:starts[c] + counts[c]]
        replace = counts[c] < cfg.per_identity
        rows.append(rng.choice(members, cfg.per_identity, replace=replace))
    rows = np.concatenate(rows)
    patches = crop32(dataset.patches[rows])
    params = sample_augmentations(len(rows), aug, rng)
    patches = augment_patches(patches, params)
    out = (patches[..., None], dataset.labels[rows])
    if return_params:
        out += (params, rows)
    return out


def patch_pairs(labels, n_impostor, rng):
    """All same-identity index pairs and ``n_impostor`` random
    different-identity pairs."""
    labels = np.asarray(labels)
    gen = []
    for lab in np.unique(labels):
        idx = np.nonzero(labels == lab)[0]
        gen += [(a, b) for i, a in enumerate(idx) for b in idx[i + 1:]]
    a = rng.integers(len(labels), size=4 * n_impostor)
    b = rng.integers(len(labels), size=4 * n_impostor)
    ok = labels[a] != labels[b]
    imp = np.stack([a[ok], b[ok]], 1)[:n_impostor]
    return np.asarray(gen, np.int64).reshape(-1, 2), imp


def patch_eer(model, dataset: AnnotatedPatchSet, n_impostor=5000, seed=0) -> float:
    """Patch-level verification EER with score = -embedding distance."""
    from .recognition import roc_eer
    emb = embed(model, crop32(dataset.patches)).astype(np.float64)
    gen, imp = patch_pairs(dataset.labels, n_impostor, np.random.default_rng(seed))
    gs = -np.linalg.norm(emb[gen[:, 0]] - emb[gen[:, 1]], axis=1)
    im = -np.linalg.norm(emb[imp[:, 0]] - emb[imp[:, 1]], axis=1)
    return roc_eer(gs, im, thresholds=np.unique(np.concatenate([gs, im]))).eer


def train_descnet(train_set: AnnotatedPatchSet, validate=None, cfg: DescNetConfig = None,
                  rng=None, model=None, log_every=50):
    """Minimises triplet semi-hard loss over identity-balanced batches.

    ``validate(model)`` returns a validation EER, or a tuple whose first
    entry is the EER and whose later entries break ties (lower is better).
    It drives early stopping and best-model selection; without it the
    final model is returned. Returns
    ``(model, history)`` with ``(step, loss)`` and ``("val", step, eer)``
    records.
    """
    cfg = cfg or DescNetConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    if model is None:
        model = build_descnet(dropout=cfg.dropout, rng=rng)
    opt = nn.SGD(cfg.base_lr, weight_decay=cfg.weight_decay)
    history = []
    best = ((math.inf,), None, 0)
    bad = 0
    for step in range(1, cfg.steps + 1):
        x, y = sample_identity_batch(train_set, cfg, cfg.augmentation, rng)
        emb = model.forward(standardize(x), train=True, rng=rng)
        loss, grad = nn.triplet_semihard_loss(emb, y, cfg.margin)
        if not math.isfinite(loss):
            raise nn.NonFiniteGradientError(f"non-finite triplet loss at step {step}")
        model.backward(grad)
        nn.sgd_step(model, opt)
        history.append((step, float(loss)))
        if log_every and step % log_every == 0:
            log.info("descnet step %d loss %.4f", step, loss)
        if validate is not None and (step % cfg.eval_every == 0 or step == cfg.steps):
            score = validate(model)
            key = tuple(float(v) for v in score) if isinstance(score, tuple) else (float(score),)
            history.append(("val", step, key[0]))
            log.info("descnet step %d validation EER %.4f", step, key[0])
            if key < best[0]:
                best = (key, model.clone(), step)
                bad = 0
            else:
                bad += 1
                if bad >= cfg.patience:
                    break
    final = best[1] if best[1] is not None else model
    final.metadata.update({"train_steps": opt.step, "best_step": best[2],
                           "margin": cfg.margin, "batch_size": cfg.batch_size,
                           "per_identity": cfg.per_identity, "enhanced_input": 0})
    return final, history
