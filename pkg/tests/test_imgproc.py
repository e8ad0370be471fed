import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from poreid.imgproc import (ImageFormatError, RigidTransform, bilinear_sample, clahe, enhance,
                            extract_patch, extract_patches, load_image, load_points,
                            median_blur, save_image, save_points, warp_rigid)
from poreid.oracles import median_reference

angles = st.floats(-math.pi, math.pi)
shifts = st.floats(-100, 100)


@given(angles, shifts, shifts)
def test_compose_with_inverse_is_identity(a, r, c):
    T = RigidTransform(a, r, c)
    pts = np.random.default_rng(0).uniform(-200, 200, (10, 2))
    np.testing.assert_allclose(T.compose(T.inverse()).apply(pts), pts, atol=1e-9)
    np.testing.assert_allclose(T.inverse().compose(T).apply(pts), pts, atol=1e-9)


@given(angles, shifts, shifts, angles, shifts, shifts)
def test_compose_order(a1, r1, c1, a2, r2, c2):
    A, B = RigidTransform(a1, r1, c1), RigidTransform(a2, r2, c2)
    pts = np.array([[3.0, -4.0], [10.0, 20.0]])
    np.testing.assert_allclose(A.compose(B).apply(pts), A.apply(B.apply(pts)), atol=1e-9)


@given(angles, shifts, shifts)
def test_rigid_preserves_distances(a, r, c):
    pts = np.random.default_rng(1).uniform(-100, 100, (8, 2))
    moved = RigidTransform(a, r, c).apply(pts)
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    d1 = np.linalg.norm(moved[:, None] - moved[None], axis=2)
    np.testing.assert_allclose(d0, d1, atol=1e-6)


def test_about_keeps_center_fixed():
    T = RigidTransform.about(0.7, (5.0, 9.0))
    np.testing.assert_allclose(T.apply([[5.0, 9.0]]), [[5.0, 9.0]], atol=1e-12)


@given(st.integers(1, 32), st.integers(1, 32), st.integers(0, 10_000))
def test_median_blur_matches_oracle(h, w, seed):
    img = np.random.default_rng(seed).integers(0, 7, (h, w)).astype(np.float32)
    assert np.array_equal(median_blur(img), median_reference(img))


def test_median_blur_rejects_even_kernel():
    with pytest.raises(ValueError):
        median_blur(np.zeros((4, 4)), 2)


def test_enhancement_preserves_shape(rng):
    img = rng.random((37, 53)).astype(np.float32)
    assert median_blur(img).shape == img.shape
    out = enhance(img)
    assert out.shape == img.shape and out.min() >= 0 and out.max() <= 1


def test_clahe_constant_image_stays_constant():
    out = clahe(np.full((64, 64), 0.4, np.float32))
    assert np.ptp(out) == 0


def test_clahe_stretches_low_contrast_ramp():
    img = np.tile(np.linspace(0.4, 0.6, 64, dtype=np.float32), (64, 1))
    out = clahe(img)
    assert np.ptp(out) > np.ptp(img)
    assert np.corrcoef(out.mean(axis=0), np.arange(64))[0, 1] > 0.9


def test_bilinear_zero_outside_and_exact_on_grid(rng):
    img = rng.random((5, 6)).astype(np.float32)
    rr, cc = np.mgrid[0:5, 0:6]
    np.testing.assert_allclose(bilinear_sample(img, rr, cc), img)
    assert bilinear_sample(img, [-2.0, 10.0], [0.0, 0.0]).tolist() == [0.0, 0.0]
    mid = bilinear_sample(img, [0.5], [0.5])[0]
    assert abs(mid - img[:2, :2].mean()) < 1e-6


def test_warp_identity_and_translation(rng):
    img = rng.random((20, 20)).astype(np.float32)
    np.testing.assert_allclose(warp_rigid(img, RigidTransform.identity()), img, atol=1e-6)
    out = warp_rigid(img, RigidTransform(0.0, 2.0, -3.0))
    np.testing.assert_allclose(out[2:, :17], img[:18, 3:], atol=1e-6)
    assert np.all(out[:2] == 0) and np.all(out[:, 17:] == 0)


def test_patch_extraction(rng):
    img = rng.random((30, 30)).astype(np.float32)
    p = extract_patch(img, (10, 12), 17)
    np.testing.assert_allclose(p, img[2:19, 4:21])
    corner = extract_patch(img, (0, 0), 5)
    assert np.all(corner[:2] == 0) and np.all(corner[:, :2] == 0)
    stack = extract_patches(img, [[10, 12], [15, 15]], 17)
    np.testing.assert_allclose(stack[0], p)
    assert extract_patch(img, (5, 5), 4).shape == (4, 4)


@pytest.mark.parametrize("ext", [".pgm", ".png"])
def test_image_roundtrip(tmp_path, rng, ext):
    img = rng.integers(0, 256, (13, 17)).astype(np.float32) / 255
    save_image(img, tmp_path / f"a{ext}")
    np.testing.assert_allclose(load_image(tmp_path / f"a{ext}"), img, atol=1e-7)


def test_pgm_with_comment(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# note\n2 1\n255\n\x00\xff")
    assert load_image(tmp_path / "c.pgm").tolist() == [[0.0, 1.0]]


@pytest.mark.parametrize("data", [b"P2\n1 1\n255\n0", b"P5\n4 4\n255\n\x00", b"garbage"])
def test_bad_images(tmp_path, data):
    (tmp_path / "x.pgm").write_bytes(data)
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "x.pgm")


def test_points_are_one_indexed_on_disk(tmp_path):
    (tmp_path / "g.txt").write_text("1 1\n10 20\n\n")
    pts = load_points(tmp_path / "g.txt")
    assert pts.tolist() == [[0.0, 0.0], [9.0, 19.0]]
    save_points(pts, tmp_path / "h.txt")
    assert (tmp_path / "h.txt").read_text() == "1 1\n10 20\n"
