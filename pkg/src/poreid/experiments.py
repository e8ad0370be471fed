"""End-to-end synthetic experiments: detection, alignment accuracy and the
descriptor ablation. Each takes a :class:`RunConfig` and, when given an
output directory, writes its artefacts there together with the resolved
configuration."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .aligner import AlignmentConfig, align_pair, build_identity_dataset
from .data import RunConfig
from .descnet import DescNetConfig, train_descnet
from .detector import (AugmentationConfig, DetectorConfig, TrainConfig, detect_pores,
                       detection_points, evaluate_detection, grid_search_thresholds,
                       pooled_report, train_detector)
from .imgproc import enhance
from .recognition import ImageId, run_recognition_experiment, write_roc, write_scores
from .synth import SynthConfig, gen_detection_set, gen_subject

log = logging.getLogger(__name__)


def synth_config(cfg: RunConfig, size=None) -> SynthConfig:
    s = int(size or cfg["synth.size"])
    return SynthConfig(size=(s, s), margin=cfg["synth.margin"],
                       ridge_period=cfg["synth.ridge_period"],
                       pore_density=cfg["synth.pore_density"], noise=cfg["synth.noise"],
                       jitter=cfg["synth.jitter"], bend=cfg["synth.bend"],
                       defects=cfg["synth.defects"], elastic=cfg["synth.elastic"],
                       pressure=cfg["synth.pressure"], pore_dropout=cfg["synth.pore_dropout"],
                       amplitude_jitter=cfg["synth.amplitude_jitter"],
                       contrast_jitter=cfg["synth.contrast_jitter"],
                       brightness_jitter=cfg["synth.brightness_jitter"],
                       rotation_spread=math.radians(cfg["synth.rotation_spread_deg"]),
                       translation_spread=cfg["synth.translation_spread"],
                       sessions=cfg["synth.sessions"], per_session=cfg["synth.per_session"])


def augmentation(cfg: RunConfig) -> AugmentationConfig:
    return AugmentationConfig(cfg["augment.translation"], math.radians(cfg["augment.rotation_deg"]),
                              cfg["augment.brightness"], cfg["augment.contrast"])


def detector_train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(steps=cfg["detector.steps"], batch_size=cfg["detector.batch_size"],
                       base_lr=cfg["detector.base_lr"], decay_factor=cfg["detector.decay_factor"],
                       decay_every=cfg["detector.decay_every"], dropout=cfg["detector.dropout"],
                       eval_every=cfg["detector.eval_every"], patience=cfg["detector.patience"],
                       augmentation=augmentation(cfg))


def descnet_config(cfg: RunConfig) -> DescNetConfig:
    return DescNetConfig(batch_size=cfg["descnet.batch_size"],
                         per_identity=cfg["descnet.per_identity"], margin=cfg["descnet.margin"],
                         dropout=cfg["descnet.dropout"], base_lr=cfg["descnet.base_lr"],
                         weight_decay=cfg["descnet.weight_decay"], steps=cfg["descnet.steps"],
                         eval_every=cfg["descnet.eval_every"], patience=cfg["descnet.patience"],
                         augmentation=augmentation(cfg))


def alignment_config(cfg: RunConfig) -> AlignmentConfig:
    return AlignmentConfig(cfg["align.lambda"], cfg["align.eps"], cfg["align.max_iterations"],
                           cfg["align.sift_ratio"], cfg["sift.scale"])


def _prepare(out, cfg):
    if out is None:
        return None
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "run.cfg")
    return out


def _write_history(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "step", "value"])
        for rec in history:
            if rec[0] == "val":
                w.writerow(["val", rec[1], f"{rec[2]:.6f}"])
            else:
                w.writerow(["loss", rec[0], f"{rec[1]:.6f}"])


# --- detection ---------------------------------------------------------------

@dataclass
class DetectionResult:
    model: object
    p_t: float
    i_t: float
    val_f: float
    test: object             # DetectionReport
    seconds: float
    history: list = field(default_factory=list)


def detection_experiment(cfg: RunConfig, out=None, split=(15, 5, 10), size=None) -> DetectionResult:
    """Trains on synthetic images (``synth.detection_size`` pixels square
    unless ``size`` is given), picks thresholds on validation, reports the
    pooled test TDR/FDR/F."""
    t0 = time.time()
    out = _prepare(out, cfg)
    rng = np.random.default_rng(cfg["seed"])
    data = gen_detection_set(sum(split), synth_config(cfg, size or cfg["synth.detection_size"]),
                             rng)
    a, b = split[0], split[0] + split[1]
    tr, va, te = data[:a], data[a:b], data[b:]
    model, history = train_detector([i for i, _ in tr], [g for _, g in tr],
                                    [i for i, _ in va], [g for _, g in va],
                                    detector_train_config(cfg), rng)
    p, i, f = grid_search_thresholds(model, [im for im, _ in va], [g for _, g in va])
    dcfg = DetectorConfig(prob_threshold=p, nms_threshold=i)
    reports = [evaluate_detection(detection_points(detect_pores(im, model, dcfg)), g)
               for im, g in te]
    test = pooled_report(reports)
    res = DetectionResult(model, p, i, f, test, time.time() - t0, history)
    if out is not None:
        nn.save_model(model, out / "detector.pknn", {"p_t": p, "i_t": i})
        _write_history(history, out / "train_log.csv")
        (out / "report.txt").write_text(
            f"p_t={p}\ni_t={i}\nval_f={f:.6f}\n{test.as_text()}\n", encoding="utf-8")
    return res


# --- alignment ---------------------------------------------------------------

@dataclass
class AlignmentRun:
    angle_error: float
    translation_error: float
    history: list
    iterations: int


def alignment_experiment(cfg: RunConfig, n_pairs=20, out=None, size=None):
    """Aligns the two impressions of ``n_pairs`` synthetic subjects using
    their ground-truth pores and compares with the true relative transform.
    Impressions differ only by the rigid motion, pore jitter and noise."""
    out = _prepare(out, cfg)
    rng = np.random.default_rng(cfg["seed"])
    scfg = replace(synth_config(cfg, size), sessions=1, per_session=2, elastic=0.0,
                   pressure=0.0, pore_dropout=0.0, amplitude_jitter=0.0,
                   contrast_jitter=0.0, brightness_jitter=0.0)
    acfg = alignment_config(cfg)
    runs = []
    for _ in range(n_pairs):
        subj = gen_subject(scfg, rng)
        a, b = subj.impressions
        st = align_pair(enhance(a.image), enhance(b.image), a.pores, b.pores, acfg)
        true = subj.relative_transform(0, 1)
        da = abs(math.remainder(st.transform.angle - true.angle, 2 * math.pi))
        dt = math.hypot(st.transform.t_row - true.t_row, st.transform.t_col - true.t_col)
        runs.append(AlignmentRun(da, dt, list(st.history), st.iteration))
    if out is not None:
        with open(out / "alignment.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["pair", "angle_error", "translation_error", "iterations", "w_history"])
            for k, r in enumerate(runs):
                w.writerow([k, f"{r.angle_error:.8f}", f"{r.translation_error:.6f}",
                            r.iterations, " ".join(f"{x:.6f}" for x in r.history)])
    return runs


# --- recognition ablation ----------------------------------------------------

@dataclass
class AblationResult:
    eers: dict
    results: dict
    descriptor: object
    detector: object
    n_identities: int
    seconds: float
    history: list = field(default_factory=list)


def _subject_images(subjects):
    images = {}
    for sid, subj in subjects.items():
        for imp in subj.impressions:
            images[ImageId(sid, imp.session + 1, imp.index + 1)] = imp.image
    return images


def recognition_validation(model, images, pores, ratio=0.7):
    """Recognition EER of a descriptor model on validation subjects; ties
    go to the larger gap between mean genuine and mean impostor scores."""
    r = run_recognition_experiment(images, pores, "learned", model, ratio)
    g = [s[3] for s in r.scores if s[2] == "genuine"]
    i = [s[3] for s in r.scores if s[2] == "impostor"]
    return r.eer, float(np.mean(i) - np.mean(g))


def recognition_ablation(cfg: RunConfig, out=None, n_train=10, n_test=20, detector=None,
                         thresholds=None, pores_from="detector") -> AblationResult:
    """Annotates ``n_train`` synthetic subjects, trains the descriptor on
    a subject-disjoint split of them, then scores ``n_test`` new subjects
    with the learned, SIFT and DP backends on one shared set of detections.

    ``detector`` is a trained detection model (a fresh one is trained when
    omitted); ``pores_from="ground_truth"`` bypasses detection entirely.
    """
    t0 = time.time()
    out = _prepare(out, cfg)
    rng = np.random.default_rng(cfg["seed"])
    scfg = synth_config(cfg)
    if pores_from == "detector" and detector is None:
        det = detection_experiment(cfg, None)
        detector, thresholds = det.model, (det.p_t, det.i_t)
    if thresholds is None:
        thresholds = (cfg["detector.p_t"], cfg["detector.i_t"])
    dcfg = DetectorConfig(prob_threshold=thresholds[0], nms_threshold=thresholds[1])

    train_subjects = {f"t{k + 1}": gen_subject(scfg, rng) for k in range(n_train)}
    test_subjects = {f"s{k + 1}": gen_subject(scfg, rng) for k in range(n_test)}

    def pores_of(subjects):
        out_ = {}
        for sid, subj in subjects.items():
            for imp in subj.impressions:
                key = ImageId(sid, imp.session + 1, imp.index + 1)
                if pores_from == "ground_truth":
                    out_[key] = imp.pores
                else:
                    out_[key] = detection_points(detect_pores(imp.image, detector, dcfg))
        return out_

    train_pores = pores_of(train_subjects)
    train_images = _subject_images(train_subjects)
    sids = list(train_subjects)
    order = rng.permutation(len(sids))
    n_fit = max(1, int(round(cfg["descnet.train_fraction"] * len(sids))))
    fit_ids = [sids[k] for k in sorted(order[:n_fit])]
    val_ids = [sids[k] for k in sorted(order[n_fit:])]
    acfg = alignment_config(cfg)

    def annotate(ids):
        entries = {}
        for sid in ids:
            keys = sorted((k for k in train_images if k.subject == sid),
                          key=lambda k: (k.session, k.index))
            entries[sid] = [(train_images[k], train_pores[k]) for k in keys]
        return build_identity_dataset(entries, cfg=acfg)

    fit_set = annotate(fit_ids)
    log.info("annotated %d identities (%d patches) for training",
             len(fit_set.identities), len(fit_set))
    validate = None
    if len(val_ids) >= 2:
        val_images = {k: v for k, v in train_images.items() if k.subject in val_ids}
        validate = lambda m: recognition_validation(m, val_images, train_pores,
                                                    cfg["match.ratio"])
    model, history = train_descnet(fit_set, validate, descnet_config(cfg), rng)

    test_images = _subject_images(test_subjects)
    test_pores = pores_of(test_subjects)
    results = {}
    for backend in ("learned", "sift", "dp"):
        results[backend] = run_recognition_experiment(test_images, test_pores, backend,
                                                      model if backend == "learned" else None,
                                                      cfg["match.ratio"])
    eers = {k: r.eer for k, r in results.items()}
    res = AblationResult(eers, results, model, detector, len(fit_set.identities),
                         time.time() - t0, history)
    if out is not None:
        nn.save_model(model, out / "descriptor.pknn")
        if detector is not None:
            nn.save_model(detector, out / "detector.pknn",
                          {"p_t": thresholds[0], "i_t": thresholds[1]})
        _write_history(history, out / "train_log.csv")
        for backend, r in results.items():
            write_scores(r.scores, out / f"scores_{backend}.csv")
            write_roc(r.roc, out / f"roc_{backend}.csv")
        (out / "report.txt").write_text(
            "".join(f"eer_{k}={v:.6f}\n" for k, v in eers.items()), encoding="utf-8")
    return res

