"""Dataset manifests, directory ingestion, synthetic dataset export and flat
``key=value`` run configurations."""
from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imgproc import load_image, load_points, save_image, save_points
from .recognition import ImageId

log = logging.getLogger(__name__)

IMAGE_EXTS = (".pgm", ".png", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff")
LAYOUTS = ("polyu-groundtruth", "polyu-db", "synthetic", "manifest")
GROUNDTRUTH_SPLIT = (15, 5, 10)


class ManifestError(ValueError):
    pass


@dataclass
class ManifestEntry:
    subject: str
    session: int
    index: int
    image: Path
    ground_truth: Path = None

    @property
    def id(self) -> ImageId:
        return ImageId(self.subject, self.session, self.index)

    def load(self):
        return load_image(self.image)

    def load_ground_truth(self):
        if self.ground_truth is None:
            raise ManifestError(f"{self.image}: no ground truth")
        return load_points(self.ground_truth)


@dataclass
class DatasetManifest:
    root: Path
    entries: list = field(default_factory=list)
    splits: dict = field(default_factory=dict)     # name -> list of entry positions

    def __post_init__(self):
        seen = {}
        dup = []
        missing = []
        for e in self.entries:
            key = (e.subject, e.session, e.index)
            if key in seen:
                dup.append(f"{key} ({seen[key]} and {e.image})")
            seen[key] = e.image
            if not Path(e.image).is_file():
                missing.append(str(e.image))
            if e.ground_truth is not None and not Path(e.ground_truth).is_file():
                missing.append(str(e.ground_truth))
        problems = [f"duplicate {d}" for d in dup] + [f"missing {m}" for m in missing]
        if problems:
            raise ManifestError("invalid manifest: " + "; ".join(problems))

    def split(self, name):
        if name == "all":
            return list(self.entries)
        if name not in self.splits:
            raise ManifestError(f"manifest has no split {name!r}")
        return [self.entries[i] for i in self.splits[name]]

    def subjects(self):
        return sorted({e.subject for e in self.entries}, key=_natural)

    def by_subject(self):
        out = {}
        for e in self.entries:
            out.setdefault(e.subject, []).append(e)
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject", "session", "index", "image", "ground_truth", "split"])
            where = {i: name for name, idx in self.splits.items() for i in idx}
            for k, e in enumerate(self.entries):
                w.writerow([e.subject, e.session, e.index, _rel(e.image, self.root),
                            "" if e.ground_truth is None else _rel(e.ground_truth, self.root),
                            where.get(k, "")])


def _rel(path, root):
    try:
        return str(Path(path).relative_to(root))
    except ValueError:
        return str(path)


def _natural(s):
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", str(s))]


def _images(directory):
    return sorted((p for p in Path(directory).iterdir()
                   if p.is_file() and p.suffix.lower() in IMAGE_EXTS),
                  key=lambda p: _natural(p.stem))


def _find_gt(stem, dirs):
    for d in dirs:
        p = Path(d) / f"{stem}.txt"
        if p.is_file():
            return p
    return None


def _gt_dirs(root):
    root = Path(root)
    return [root] + [p for p in sorted(root.iterdir()) if p.is_dir()]


def ingest(root, layout) -> DatasetManifest:
    """Builds a manifest from a directory.

    ``polyu-groundtruth``: numbered images with same-stem ``.txt`` pore files
    (in the root or any direct subdirectory); the first 15 in numeric order
    are ``train``, the next 5 ``val``, the last 10 ``test``.
    ``polyu-db`` / ``synthetic``: images named ``subject_session_index``
    (searched in ``root`` and ``root/images``), optional ground truth with the
    same stem; subjects with a single session are dropped with a warning.
    ``manifest``: ``root`` is a CSV with columns
    ``subject,session,index,image[,ground_truth[,split]]``.
    """
    root = Path(root)
    if layout not in LAYOUTS:
        raise ManifestError(f"unknown layout {layout!r}; choose from {', '.join(LAYOUTS)}")
    if layout == "manifest":
        return _ingest_csv(root)
    if not root.is_dir():
        raise ManifestError(f"{root} is not a directory")
    if layout == "polyu-groundtruth":
        return _ingest_groundtruth(root)
    return _ingest_db(root)


def _ingest_groundtruth(root):
    dirs = _gt_dirs(root)
    imgs = [p for d in dirs for p in _images(d)]
    imgs = sorted({p.stem: p for p in imgs}.values(), key=lambda p: _natural(p.stem))
    entries = []
    missing = []
    for k, p in enumerate(imgs):
        gt = _find_gt(p.stem, dirs)
        if gt is None:
            missing.append(p.name)
        entries.append(ManifestEntry(p.stem, 1, 1, p, gt))
    if missing:
        raise ManifestError("images without ground truth: " + ", ".join(missing))
    n = len(entries)
    a, b, _ = GROUNDTRUTH_SPLIT
    if n != sum(GROUNDTRUTH_SPLIT):
        log.warning("%d ground-truth images; splitting proportionally to 15/5/10", n)
        a = int(round(n * 0.5))
        b = int(round(n * 5 / 30))
    splits = {"train": list(range(a)), "val": list(range(a, a + b)),
              "test": list(range(a + b, n))}
    return DatasetManifest(root, entries, splits)


NAME = re.compile(r"^(?P<subject>[^_]+)_(?P<session>\d+)_(?P<index>\d+)$")


def _ingest_db(root):
    img_dir = root / "images" if (root / "images").is_dir() else root
    gt_dirs = [d for d in (root / "gt", img_dir) if d.is_dir()]
    entries = []
    bad = []
    for p in _images(img_dir):
        m = NAME.match(p.stem)
        if not m:
            bad.append(p.name)
            continue
        entries.append(ManifestEntry(m["subject"], int(m["session"]), int(m["index"]), p,
                                     _find_gt(p.stem, gt_dirs)))
    if bad:
        raise ManifestError("file names not of the form subject_session_index: "
                            + ", ".join(bad))
    if not entries:
        raise ManifestError(f"no images found under {img_dir}")
    sessions = {}
    for e in entries:
        sessions.setdefault(e.subject, set()).add(e.session)
    single = sorted((s for s, v in sessions.items() if len(v) < 2), key=_natural)
    for s in single:
        log.warning("subject %s has a single session; excluded", s)
    entries = [e for e in entries if e.subject not in single]
    entries.sort(key=lambda e: (_natural(e.subject), e.session, e.index))
    splits = {}
    split_file = root / "splits.csv"
    if split_file.is_file():
        where = {}
        with open(split_file, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                where[row["subject"]] = row["split"]
        for k, e in enumerate(entries):
            if e.subject in where:
                splits.setdefault(where[e.subject], []).append(k)
    return DatasetManifest(root, entries, splits)


def _ingest_csv(path):
    if not path.is_file():
        raise ManifestError(f"{path} does not exist")
    base = path.parent
    entries = []
    splits = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for k, row in enumerate(csv.DictReader(fh)):
            try:
                gt = row.get("ground_truth") or None
                entries.append(ManifestEntry(row["subject"], int(row["session"]),
                                             int(row["index"]), base / row["image"],
                                             None if gt is None else base / gt))
            except (KeyError, ValueError) as exc:
                raise ManifestError(f"{path}: bad row {k + 2}: {exc}") from exc
            if row.get("split"):
                splits.setdefault(row["split"], []).append(k)
    return DatasetManifest(base, entries, splits)


# --- synthetic export ---------------------------------------------------------

def write_synthetic(root, subjects, detection_set=None, splits=None) -> DatasetManifest:
    """Writes ``SynthSubject`` impressions as ``images/{s}_{session}_{index}.pgm``
    with ground truth in ``gt/`` and true master-to-impression transforms in
    ``transforms.csv``. ``detection_set`` (image, ground truth) pairs go to
    ``detection/`` with numeric names, in the ground-truth layout.
    ``splits`` maps subject id to a split name."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "gt").mkdir(exist_ok=True)
    rows = []
    for sid, subj in subjects.items():
        for imp in subj.impressions:
            stem = f"{sid}_{imp.session + 1}_{imp.index + 1}"
            save_image(imp.image, root / "images" / f"{stem}.pgm")
            save_points(np.rint(imp.pores), root / "gt" / f"{stem}.txt")
            T = imp.transform
            rows.append((stem, repr(T.angle), repr(T.t_row), repr(T.t_col)))
    with open(root / "transforms.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image", "angle", "t_row", "t_col"])
        w.writerows(rows)
    if splits:
        with open(root / "splits.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject", "split"])
            w.writerows(sorted(splits.items(), key=lambda kv: _natural(kv[0])))
    if detection_set:
        det = root / "detection"
        det.mkdir(exist_ok=True)
        for k, (img, gt) in enumerate(detection_set, start=1):
            save_image(img, det / f"{k}.pgm")
            save_points(np.rint(gt), det / f"{k}.txt")
    return ingest(root, "synthetic") if rows else None


def read_transforms(root):
    from .imgproc import RigidTransform
    out = {}
    with open(Path(root) / "transforms.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out[row["image"]] = RigidTransform(float(row["angle"]), float(row["t_row"]),
                                               float(row["t_col"]))
    return out


# --- run configuration -----------------------------------------------------

DEFAULTS = {
    "seed": 0,
    "synth.size": 224,
    "synth.detection_size": 128,
    "synth.margin": 40,
    "synth.ridge_period": 12.0,
    "synth.pore_density": 0.03,
    "synth.noise": 0.05,
    "synth.bend": 1.5,
    "synth.defects": 1.0,
    "synth.elastic": 2.0,
    "synth.pressure": 0.15,
    "synth.pore_dropout": 0.1,
    "synth.amplitude_jitter": 0.2,
    "synth.contrast_jitter": 0.1,
    "synth.brightness_jitter": 0.05,
    "synth.jitter": 0.5,
    "synth.rotation_spread_deg": 15.0,
    "synth.translation_spread": 30.0,
    "synth.sessions": 2,
    "synth.per_session": 3,
    "detector.p_t": 0.9,
    "detector.i_t": 0.1,
    "detector.steps": 20000,
    "detector.batch_size": 256,
    "detector.base_lr": 0.1,
    "detector.decay_factor": 0.96,
    "detector.decay_every": 2000,
    "detector.dropout": 0.5,
    "detector.eval_every": 500,
    "detector.patience": 10,
    "augment.translation": 1.5,
    "augment.rotation_deg": 10.0,
    "augment.brightness": 0.03,
    "augment.contrast": 0.05,
    "align.lambda": 500.0,
    "align.eps": 1e-5,
    "align.max_iterations": 10,
    "align.sift_ratio": 0.8,
    "sift.scale": 8.0,
    "enhance.blur": 3,
    "enhance.clip_limit": 3.0,
    "descnet.batch_size": 252,
    "descnet.per_identity": 6,
    "descnet.margin": 2.0,
    "descnet.dropout": 0.3,
    "descnet.base_lr": 0.1,
    "descnet.weight_decay": 0.0,
    "descnet.steps": 3000,
    "descnet.eval_every": 100,
    "descnet.patience": 10,
    "descnet.train_fraction": 0.6,
    "match.ratio": 0.7,
}


class RunConfig(dict):
    """Flat ``section.key=value`` settings; missing keys fall back to
    :data:`DEFAULTS`."""

    def __init__(self, values=None):
        super().__init__(DEFAULTS)
        for k, v in (values or {}).items():
            self[k] = v

    def __setitem__(self, key, value):
        if key in DEFAULTS and not isinstance(value, str):
            value = type(DEFAULTS[key])(value)
        elif key in DEFAULTS:
            value = _parse(value, type(DEFAULTS[key]))
        super().__setitem__(key, value)

    def update(self, other=(), **kw):
        for k, v in dict(other, **kw).items():
            self[k] = v

    @classmethod
    def load(cls, path):
        values = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ManifestError(f"{path}:{lineno}: expected key=value")
                k, v = line.split("=", 1)
                values[k.strip()] = v.strip()
        return cls(values)

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for k in sorted(self):
                fh.write(f"{k}={_format(self[k])}\n")


def _parse(text, kind):
    if kind is bool:
        return text.lower() in ("1", "true", "yes")
    if kind is int:
        return int(float(text))
    if kind is float:
        return float(text)
    return text


def _format(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return str(v)
