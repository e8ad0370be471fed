"""Grayscale images, enhancement, rigid warps and patch extraction.

Images are 2-D float32 numpy arrays with values in [0, 1], indexed
``(row, col)`` with row increasing downward. Points are ``(row, col)``
pairs in the same frame; pixel centers sit on integer coordinates.
"""
from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass

import cv2
import numpy as np
from scipy import ndimage


class ImageFormatError(ValueError):
    pass


def as_image(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class RigidTransform:
    """``apply(p) = R(angle) @ p + t`` on ``(row, col)`` points."""

    angle: float = 0.0
    t_row: float = 0.0
    t_col: float = 0.0

    @property
    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        return np.array([[c, -s], [s, c]])

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.t_row, self.t_col])

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, np.float64)
        return p @ self.matrix.T + self.translation

    __call__ = apply

    def inverse(self) -> "RigidTransform":
        t = -self.matrix.T @ self.translation
        return RigidTransform(-self.angle, float(t[0]), float(t[1]))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self.compose(other)(p) == self(other(p))``."""
        t = self.matrix @ other.translation + self.translation
        angle = math.remainder(self.angle + other.angle, 2 * math.pi)
        return RigidTransform(angle, float(t[0]), float(t[1]))

    @classmethod
    def about(cls, angle, center, shift=(0.0, 0.0)) -> "RigidTransform":
        """Rotation by ``angle`` around ``center`` followed by ``shift``."""
        c = np.asarray(center, np.float64)
        rot = cls(angle)
        t = c - rot.matrix @ c + np.asarray(shift, np.float64)
        return cls(angle, float(t[0]), float(t[1]))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()


def median_blur(img, ksize=3) -> np.ndarray:
    """Median filter with edge replication at the borders."""
    if ksize % 2 == 0 or ksize < 1:
        raise ValueError(f"median kernel must be odd, got {ksize}")
    return ndimage.median_filter(as_image(img), size=ksize, mode="nearest")


def clahe(img, clip_limit=3.0, tiles=(8, 8)) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization on 256 levels.

    Backed by OpenCV, which clips each tile histogram at
    ``clip_limit * tile_area / 256``, redistributes the excess uniformly and
    bilinearly blends neighbouring tile mappings.
    """
    img = as_image(img)
    if img.shape[0] < tiles[0] or img.shape[1] < tiles[1]:
        raise ValueError(f"image {img.shape} smaller than the {tiles} tile grid")
    u8 = to_uint8(img)
    op = cv2.createCLAHE(clipLimit=float(clip_limit), tileGridSize=(tiles[1], tiles[0]))
    return op.apply(u8).astype(np.float32) / 255.0


def enhance(img, blur=3, clip_limit=3.0) -> np.ndarray:
    """Median blur then CLAHE, the preprocessing used before SIFT."""
    return clahe(median_blur(img, blur), clip_limit)


def bilinear_sample(img, rows, cols) -> np.ndarray:
    """Samples ``img`` at real-valued coordinates; outside is zero-padded."""
    img = np.asarray(img)
    h, w = img.shape
    rows = np.asarray(rows, np.float64)
    cols = np.asarray(cols, np.float64)
    r0 = np.floor(rows)
    c0 = np.floor(cols)
    fr = rows - r0
    fc = cols - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    padded = np.zeros((h + 2, w + 2), dtype=np.float64)
    padded[1:-1, 1:-1] = img
    out = np.zeros(rows.shape, np.float64)
    for dr, wr in ((0, 1 - fr), (1, fr)):
        for dc, wc in ((0, 1 - fc), (1, fc)):
            rr = np.clip(r0 + dr + 1, 0, h + 1)
            cc = np.clip(c0 + dc + 1, 0, w + 1)
            out += wr * wc * padded[rr, cc]
    return out.astype(np.float32)


def warp_rigid(img, transform: RigidTransform, shape=None) -> np.ndarray:
    """``out(p) = img(T^-1(p))`` with bilinear interpolation; samples that
    fall outside the source read as zero."""
    img = as_image(img)
    h, w = shape or img.shape
    rr, cc = np.mgrid[0:h, 0:w]
    src = transform.inverse().apply(np.stack([rr.ravel(), cc.ravel()], axis=1))
    return bilinear_sample(img, src[:, 0], src[:, 1]).reshape(h, w)


def extract_patch(img, center, size) -> np.ndarray:
    """``size x size`` patch centred at ``center`` (zero outside the image).

    For even sizes the centre sits at index ``size // 2``.
    """
    half = size // 2
    offs = np.arange(size) - half
    r = center[0] + offs[:, None]
    c = center[1] + offs[None, :]
    rr = np.broadcast_to(r, (size, size))
    cc = np.broadcast_to(c, (size, size))
    return bilinear_sample(img, rr, cc)


def extract_patches(img, centers, size) -> np.ndarray:
    """Stack of patches, shape ``(len(centers), size, size)``."""
    centers = np.asarray(centers, np.float64).reshape(-1, 2)
    half = size // 2
    offs = np.arange(size) - half
    rr = centers[:, 0, None, None] + offs[None, :, None]
    cc = centers[:, 1, None, None] + offs[None, None, :]
    rr, cc = np.broadcast_arrays(rr, cc)
    return bilinear_sample(img, rr, cc)


def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(as_image(img), 0, 1) * 255).astype(np.uint8)


def _read_pgm(data: bytes) -> np.ndarray:
    tokens = []
    pos = 0
    token_re = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")
    for _ in range(4):
        m = token_re.match(data, pos)
        if not m:
            raise ImageFormatError("corrupt PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise ImageFormatError(f"only binary PGM (P5) is supported, got {tokens[0]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError("corrupt PGM header") from exc
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit PGM is supported (maxval {maxval})")
    pos += 1  # single whitespace byte after maxval
    raw = data[pos:pos + width * height]
    if len(raw) != width * height:
        raise ImageFormatError("truncated PGM pixel data")
    return np.frombuffer(raw, np.uint8).reshape(height, width)


def load_image(path) -> np.ndarray:
    """Loads an 8-bit grayscale image (binary PGM natively, anything OpenCV
    decodes otherwise) into [0, 1] floats."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] == b"P5":
        u8 = _read_pgm(data)
    elif data[:1] == b"P":
        raise ImageFormatError(f"{path}: unsupported PNM variant {data[:2]!r}")
    else:
        u8 = cv2.imdecode(np.frombuffer(data, np.uint8), cv2.IMREAD_GRAYSCALE)
        if u8 is None:
            raise ImageFormatError(f"{path}: unrecognised image format")
    return u8.astype(np.float32) / 255.0


def save_image(img, path) -> None:
    u8 = to_uint8(img)
    ext = os.path.splitext(str(path))[1].lower()
    if ext in (".pgm", ".pnm", ""):
        header = f"P5\n{u8.shape[1]} {u8.shape[0]}\n255\n".encode("ascii")
        with open(path, "wb") as fh:
            fh.write(header + u8.tobytes())
        return
    ok, buf = cv2.imencode(ext, u8)
    if not ok:
        raise ImageFormatError(f"cannot encode {ext} images")
    with open(path, "wb") as fh:
        fh.write(buf.tobytes())


def load_points(path) -> np.ndarray:
    """Reads a ground-truth file of 1-indexed ``row col`` integer pairs and
    returns 0-indexed float coordinates, shape ``(n, 2)``."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 2:
                raise ImageFormatError(f"{path}:{lineno}: expected 'row col'")
            rows.append((int(float(parts[0])) - 1, int(float(parts[1])) - 1))
    return np.asarray(rows, np.float64).reshape(-1, 2)


def save_points(points, path) -> None:
    pts = np.rint(np.asarray(points, np.float64)).astype(int).reshape(-1, 2) + 1
    with open(path, "w", encoding="utf-8") as fh:
        for r, c in pts:
            fh.write(f"{r} {c}\n")
