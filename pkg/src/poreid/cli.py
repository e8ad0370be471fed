"""``poreid`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Commands that write an output directory also write ``run.cfg`` there, the
fully resolved configuration; ``poreid rerun DIR/run.cfg --out NEW``
repeats the run.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import nn
from .aligner import (AlignmentFailedError, AnnotatedPatchSet, DegenerateConfigurationError,
                      align_pair, build_identity_dataset)
from .data import ManifestError, RunConfig, ingest, write_synthetic
from .imgproc import ImageFormatError, enhance, load_image, load_points

log = logging.getLogger("poreid")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


# --- helpers -----------------------------------------------------------------

def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg[k.strip()] = v.strip()
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def _record(cfg: RunConfig, argv, out):
    """Stores the command line (minus --out/--config) so the run can be
    replayed from the materialised configuration."""
    keep = []
    skip = False
    for a in argv:
        if skip:
            skip = False
            continue
        if a in ("--out", "--config"):
            skip = True
            continue
        if a.startswith("--out=") or a.startswith("--config="):
            continue
        keep.append(a)
    cfg["cli.argv"] = json.dumps(keep)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "run.cfg")
    return out


def _load_model(path):
    if not path or not Path(path).is_file():
        raise UsageError(f"model file {path} not found")
    return nn.load_model(path)


def _detector_thresholds(model, cfg, args):
    p = getattr(args, "p_t", None)
    i = getattr(args, "i_t", None)
    meta = model.metadata
    if p is None:
        p = float(meta.get("p_t", cfg["detector.p_t"]))
    if i is None:
        i = float(meta.get("i_t", cfg["detector.i_t"]))
    return p, i


def _pores(img, path, model, cfg, args):
    from .detector import DetectorConfig, detect_pores, detection_points
    if path:
        return load_points(path)
    if model is None:
        raise UsageError("give pore files or --detector")
    p, i = _detector_thresholds(model, cfg, args)
    return detection_points(detect_pores(img, model, DetectorConfig(p, i)))


# --- subcommands -------------------------------------------------------------

def cmd_synth(args, cfg, argv):
    from .experiments import synth_config
    from .synth import gen_detection_set, gen_subject
    out = _record(cfg, argv, args.out)
    rng = np.random.default_rng(cfg["seed"])
    scfg = synth_config(cfg)
    subjects = {f"{k + 1}": gen_subject(scfg, rng) for k in range(args.subjects)}
    size = args.detection_size or cfg["synth.detection_size"]
    det = gen_detection_set(args.detection_images, synth_config(cfg, size), rng) \
        if args.detection_images else None
    write_synthetic(out, subjects, det)
    print(f"wrote {len(subjects)} subjects to {out}")


def _detection_sets(args, cfg):
    layout = args.layout
    root = Path(args.data)
    if layout == "synthetic":
        root = root / "detection"
        layout = "polyu-groundtruth"
    return ingest(root, layout)


def cmd_train_detector(args, cfg, argv):
    from .detector import grid_search_thresholds, train_detector
    from .experiments import _write_history, detector_train_config
    man = _detection_sets(args, cfg)
    out = _record(cfg, argv, args.out)
    tr, va = man.split("train"), man.split("val")
    rng = np.random.default_rng(cfg["seed"])
    model, history = train_detector([e.load() for e in tr], [e.load_ground_truth() for e in tr],
                                    [e.load() for e in va], [e.load_ground_truth() for e in va],
                                    detector_train_config(cfg), rng)
    p, i, f = grid_search_thresholds(model, [e.load() for e in va],
                                     [e.load_ground_truth() for e in va])
    nn.save_model(model, out / "detector.pknn", {"p_t": p, "i_t": i})
    _write_history(history, out / "train_log.csv")
    print(f"p_t={p} i_t={i} validation F={f:.4f}")


def cmd_detect(args, cfg, argv):
    from .detector import DetectorConfig, detect_pores, write_detections
    model = _load_model(args.detector)
    img = load_image(args.image)
    p, i = _detector_thresholds(model, cfg, args)
    dets = detect_pores(img, model, DetectorConfig(p, i))
    if args.out:
        write_detections(dets, args.out)
    else:
        for d in dets:
            print(f"{d.row} {d.col} {d.probability:.6f}")


def cmd_eval_detect(args, cfg, argv):
    from .detector import (DetectorConfig, detect_pores, detection_points, evaluate_detection,
                           pooled_report)
    model = _load_model(args.detector)
    man = _detection_sets(args, cfg)
    p, i = _detector_thresholds(model, cfg, args)
    dcfg = DetectorConfig(p, i)
    reports = [evaluate_detection(detection_points(detect_pores(e.load(), model, dcfg)),
                                  e.load_ground_truth()) for e in man.split(args.split)]
    text = pooled_report(reports).as_text()
    if args.out:
        out = _record(cfg, argv, args.out)
        (out / "report.txt").write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_align(args, cfg, argv):
    from .experiments import alignment_config
    model = _load_model(args.detector) if args.detector else None
    img1, img2 = load_image(args.image1), load_image(args.image2)
    p1 = _pores(img1, args.pores1, model, cfg, args)
    p2 = _pores(img2, args.pores2, model, cfg, args)
    st = align_pair(enhance(img1), enhance(img2), p1, p2, alignment_config(cfg))
    T = st.transform
    print(f"angle={T.angle:.8f} t_row={T.t_row:.6f} t_col={T.t_col:.6f} "
          f"residual={st.mse:.6f} correspondences={len(st.matches)} iterations={st.iteration}")


def _manifest(args):
    return ingest(args.data, args.layout)


def cmd_build_annotations(args, cfg, argv):
    from .experiments import alignment_config
    man = _manifest(args)
    model = _load_model(args.detector) if args.detector else None
    if model is None and not args.ground_truth:
        raise UsageError("give --detector or --ground-truth")
    out = _record(cfg, argv, args.out)
    subjects = {}
    for sid, entries in man.by_subject().items():
        items = []
        for e in entries:
            img = e.load()
            pores = e.load_ground_truth() if args.ground_truth else _pores(img, None, model,
                                                                             cfg, args)
            items.append((img, pores))
        subjects[sid] = items
    ids = {sid: k for k, sid in enumerate(subjects)}
    ps = build_identity_dataset({ids[s]: v for s, v in subjects.items()},
                                cfg=alignment_config(cfg))
    ps.save(out / "patches.pknn", {f"name.{k}": s for s, k in ids.items()})
    print(f"{len(ps.identities)} identities, {len(ps)} patches")


def cmd_train_descriptor(args, cfg, argv):
    from .descnet import patch_eer, train_descnet
    from .experiments import _write_history, descnet_config
    ps = AnnotatedPatchSet.load(args.patches)
    out = _record(cfg, argv, args.out)
    rng = np.random.default_rng(cfg["seed"])
    subjects = np.unique(ps.subjects)
    order = rng.permutation(len(subjects))
    n_fit = max(1, int(round(cfg["descnet.train_fraction"] * len(subjects))))
    fit = np.isin(ps.subjects, subjects[np.sort(order[:n_fit])])

    def subset(mask):
        return AnnotatedPatchSet(ps.patches[mask], ps.labels[mask], ps.subjects[mask],
                                 ps.sources[mask], ps.centers[mask])
    fit_set = subset(fit)
    val_set = subset(~fit) if (~fit).any() else None
    validate = (lambda m: patch_eer(m, val_set)) if val_set is not None else None
    model, history = train_descnet(fit_set, validate, descnet_config(cfg), rng)
    nn.save_model(model, out / "descriptor.pknn")
    _write_history(history, out / "train_log.csv")
    vals = [r[2] for r in history if r[0] == "val"]
    print(f"trained {model.metadata['train_steps']} steps"
          + (f", best validation EER {min(vals):.4f}" if vals else ""))


def _descriptors(img, pores, backend, model, cfg):
    from .descnet import describe_pores
    from .handcrafted import dp_describe, sift_describe
    if backend == "learned":
        return describe_pores(img, pores, model)
    if backend == "sift":
        return sift_describe(enhance(img, cfg["enhance.blur"], cfg["enhance.clip_limit"]),
                             pores, cfg["sift.scale"]).vectors
    return dp_describe(img, pores).vectors


def cmd_match(args, cfg, argv):
    from .recognition import match_fingerprints
    det = _load_model(args.detector) if args.detector else None
    if args.backend == "learned" and not args.descriptor:
        raise UsageError("the learned backend needs --descriptor")
    desc = _load_model(args.descriptor) if args.backend == "learned" else None
    imgs = [load_image(args.image1), load_image(args.image2)]
    pores = [_pores(imgs[0], args.pores1, det, cfg, args),
             _pores(imgs[1], args.pores2, det, cfg, args)]
    d = [_descriptors(im, p, args.backend, desc, cfg) for im, p in zip(imgs, pores)]
    print(match_fingerprints(d[0], d[1], cfg["match.ratio"]))


def cmd_eval_recognition(args, cfg, argv):
    from .detector import DetectorConfig, detect_pores, detection_points
    from .recognition import (DetectionCache, gen_protocol, match_fingerprints, model_hash,
                              roc_eer, write_roc, write_scores)
    man = _manifest(args)
    if args.split:
        entries = man.split(args.split)
    else:
        entries = man.entries
    if args.backend == "learned" and not args.descriptor:
        raise UsageError("the learned backend needs --descriptor")
    if not args.ground_truth and not args.detector:
        raise UsageError("give --detector or --ground-truth")
    det = _load_model(args.detector) if args.detector else None
    desc = _load_model(args.descriptor) if args.backend == "learned" else None
    out = _record(cfg, argv, args.out)
    by_id = {e.id: e for e in entries}
    protocol = gen_protocol(sorted(by_id, key=lambda i: (i.subject, i.session, i.index)))
    cache = DetectionCache()
    dcfg = None
    if det is not None:
        p, i = _detector_thresholds(det, cfg, args)
        dcfg = DetectorConfig(p, i)
        key = (model_hash(det), p, i)
    needed = sorted({i for pr in protocol.genuine + protocol.impostor for i in pr},
                    key=lambda i: (i.subject, i.session, i.index))
    descs = {}
    for iid in needed:
        e = by_id[iid]
        img = e.load()
        if args.ground_truth:
            pores = e.load_ground_truth()
        else:
            pores = cache.get(img, lambda im: detection_points(detect_pores(im, det, dcfg)), key)
        descs[iid] = _descriptors(img, pores, args.backend, desc, cfg)
    rows = []
    for label, pairs in (("genuine", protocol.genuine), ("impostor", protocol.impostor)):
        for a, b in pairs:
            rows.append((str(a), str(b), label,
                         match_fingerprints(descs[a], descs[b], cfg["match.ratio"])))
    roc = roc_eer([r[3] for r in rows if r[2] == "genuine"],
                  [r[3] for r in rows if r[2] == "impostor"])
    write_scores(rows, out / "scores.csv")
    write_roc(roc, out / "roc.csv")
    print(f"eer={roc.eer:.6f} genuine={len(protocol.genuine)} impostor={len(protocol.impostor)}")


def cmd_experiment(args, cfg, argv):
    from . import experiments
    out = _record(cfg, argv, args.out)
    if args.name == "detection":
        r = experiments.detection_experiment(cfg, out)
        print(f"p_t={r.p_t} i_t={r.i_t} {r.test.as_text()}")
    elif args.name == "alignment":
        runs = experiments.alignment_experiment(cfg, args.pairs, out)
        print(f"median angle error {np.median([r.angle_error for r in runs]):.6f} rad, "
              f"median translation error {np.median([r.translation_error for r in runs]):.4f} px")
    else:
        det = _load_model(args.detector) if args.detector else None
        thr = _detector_thresholds(det, cfg, args) if det is not None else None
        r = experiments.recognition_ablation(
            cfg, out, detector=det, thresholds=thr,
            pores_from="ground_truth" if args.ground_truth else "detector")
        print(" ".join(f"eer_{k}={v:.6f}" for k, v in r.eers.items()))
    # the configuration may have been extended by the experiment; keep it in sync
    cfg.dump(out / "run.cfg")


def cmd_selftest(args, cfg, argv):
    from .selftest import run_all
    failures = run_all(quick=not args.full)
    if failures:
        for f in failures:
            print(f"FAIL {f}")
        return EXIT_NUMERIC
    print("all oracle checks passed")
    return EXIT_OK


def cmd_rerun(args, cfg, argv):
    stored = RunConfig.load(args.run_config)
    if "cli.argv" not in stored:
        raise UsageError(f"{args.run_config} does not record a command line")
    old = json.loads(stored["cli.argv"])
    return main(old + ["--config", str(args.run_config), "--out", str(args.out)])


# --- parser ------------------------------------------------------------------

def _common(p, out_required=False, out_help="output directory"):
    p.add_argument("--config", help="run configuration file (key=value lines)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one configuration value (repeatable)")
    p.add_argument("--seed", type=int, help="random seed (overrides the configuration)")
    p.add_argument("--out", required=out_required, help=out_help)


def _thresholds(p):
    p.add_argument("--p-t", dest="p_t", type=float, help="probability threshold")
    p.add_argument("--i-t", dest="i_t", type=float, help="NMS IoU threshold")


def build_parser():
    ap = _Parser(prog="poreid", description="Pore-based high-resolution fingerprint recognition.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    _common(p, True)
    p.add_argument("--subjects", type=int, default=10)
    p.add_argument("--detection-images", type=int, default=30,
                   help="extra single impressions for detector training (0 for none)")
    p.add_argument("--detection-size", type=int,
                   help="side of the detection images (default: synth.detection_size)")
    p.set_defaults(func=cmd_synth)

    layouts = ("polyu-groundtruth", "polyu-db", "synthetic", "manifest")

    p = sub.add_parser("train-detector", help="train the pore detector")
    _common(p, True)
    p.add_argument("--data", required=True)
    p.add_argument("--layout", choices=layouts, default="synthetic")
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("detect", help="detect pores in one image")
    _common(p, out_help="detections file (default: print)")
    p.add_argument("image")
    p.add_argument("--detector", required=True)
    _thresholds(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval-detect", help="TDR / FDR / F-score on a labelled split")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--layout", choices=layouts, default="synthetic")
    p.add_argument("--split", default="test")
    p.add_argument("--detector", required=True)
    _thresholds(p)
    p.set_defaults(func=cmd_eval_detect)

    p = sub.add_parser("align", help="align two images of the same finger")
    _common(p)
    p.add_argument("image1")
    p.add_argument("image2")
    p.add_argument("--pores1")
    p.add_argument("--pores2")
    p.add_argument("--detector")
    _thresholds(p)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("build-annotations", help="label pore identities across images")
    _common(p, True)
    p.add_argument("--data", required=True)
    p.add_argument("--layout", choices=layouts, default="synthetic")
    p.add_argument("--detector")
    p.add_argument("--ground-truth", action="store_true", help="use ground-truth pores")
    _thresholds(p)
    p.set_defaults(func=cmd_build_annotations)

    p = sub.add_parser("train-descriptor", help="train the pore descriptor network")
    _common(p, True)
    p.add_argument("--patches", required=True)
    p.set_defaults(func=cmd_train_descriptor)

    p = sub.add_parser("match", help="score two images (prints an integer)")
    _common(p)
    p.add_argument("image1")
    p.add_argument("image2")
    p.add_argument("--backend", choices=("learned", "sift", "dp"), default="learned")
    p.add_argument("--descriptor")
    p.add_argument("--detector")
    p.add_argument("--pores1")
    p.add_argument("--pores2")
    _thresholds(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval-recognition", help="genuine/impostor protocol with ROC and EER")
    _common(p, True)
    p.add_argument("--data", required=True)
    p.add_argument("--layout", choices=layouts, default="synthetic")
    p.add_argument("--split", help="restrict to one split of the manifest")
    p.add_argument("--backend", choices=("learned", "sift", "dp"), default="learned")
    p.add_argument("--descriptor")
    p.add_argument("--detector")
    p.add_argument("--ground-truth", action="store_true", help="use ground-truth pores")
    _thresholds(p)
    p.set_defaults(func=cmd_eval_recognition)

    p = sub.add_parser("experiment", help="run a synthetic end-to-end experiment")
    _common(p, True)
    p.add_argument("name", choices=("detection", "alignment", "recognition"))
    p.add_argument("--pairs", type=int, default=20)
    p.add_argument("--detector", help="reuse a trained detector (recognition)")
    p.add_argument("--ground-truth", action="store_true",
                   help="use ground-truth pores instead of detections (recognition)")
    _thresholds(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("selftest", help="run the oracle checks")
    p.add_argument("--full", action="store_true", help="larger instance counts")
    p.set_defaults(func=cmd_selftest, config=None, set=None, seed=None)

    p = sub.add_parser("rerun", help="repeat a run from its run.cfg")
    p.add_argument("run_config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rerun, config=None, set=None, seed=None)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        code = args.func(args, cfg, argv[argv.index(args.command):])
        return EXIT_OK if code is None else code
    except UsageError as exc:
        print(f"poreid: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, AlignmentFailedError, DegenerateConfigurationError) as exc:
        print(f"poreid: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, ManifestError, ImageFormatError, nn.FormatError,
            ValueError) as exc:
        print(f"poreid: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
