import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from poreid.aligner import (AlignmentConfig, AlignmentFailedError, AnnotatedPatchSet,
                            DegenerateConfigurationError, align_pair, annotate_subject,
                            build_identity_dataset, combined_distance, horn_align,
                            mean_squared_residual, overlap_region, overlap_region2)
from poreid.imgproc import RigidTransform, enhance, warp_rigid
from poreid.oracles import rigid_residual
from poreid.synth import SynthConfig, gen_master, gen_subject


@given(st.integers(2, 50), st.floats(-math.pi, math.pi), st.floats(-50, 50), st.floats(-50, 50),
       st.integers(0, 10_000))
def test_horn_recovers_noiseless(k, a, tr, tc, seed):
    Q = np.random.default_rng(seed).uniform(-100, 100, (k, 2))
    T = RigidTransform(a, tr, tc)
    est = horn_align(T.apply(Q), Q)
    assert abs(math.remainder(est.angle - a, 2 * math.pi)) < 1e-6
    assert np.abs(est.translation - T.translation).max() < 1e-6


@given(st.integers(0, 10_000))
def test_horn_is_globally_optimal(seed):
    r = np.random.default_rng(seed)
    Q = r.uniform(-50, 50, (12, 2))
    P = RigidTransform(r.uniform(-3, 3), *r.uniform(-20, 20, 2)).apply(Q) \
        + r.normal(0, 0.5, (12, 2))
    best = mean_squared_residual(P, Q, horn_align(P, Q))
    for _ in range(200):
        a, tr, tc = r.uniform(-math.pi, math.pi), *r.uniform(-60, 60, 2)
        assert best <= rigid_residual(P, Q, a, (tr, tc)) + 1e-12


@given(st.integers(0, 10_000))
def test_horn_is_equivariant(seed):
    r = np.random.default_rng(seed)
    Q = r.uniform(-50, 50, (8, 2))
    P = Q + r.normal(0, 2, (8, 2))
    G = RigidTransform(r.uniform(-3, 3), *r.uniform(-20, 20, 2))
    lhs = horn_align(G.apply(P), Q)
    rhs = G.compose(horn_align(P, Q))
    assert abs(math.remainder(lhs.angle - rhs.angle, 2 * math.pi)) < 1e-6
    np.testing.assert_allclose(lhs.translation, rhs.translation, atol=1e-6)


def test_horn_degenerate_inputs():
    with pytest.raises(DegenerateConfigurationError):
        horn_align([[1.0, 2.0]], [[3.0, 4.0]])
    with pytest.raises(DegenerateConfigurationError):
        horn_align([[1.0, 2.0], [1.0, 2.0]], [[3.0, 4.0], [3.0, 4.0]])
    with pytest.raises(ValueError):
        horn_align(np.zeros((3, 2)), np.zeros((2, 2)))


def test_combined_distance_monotone():
    T = RigidTransform(0.3, 1.0, -2.0)
    p2 = np.array([5.0, 5.0])
    base = T.apply(p2[None])[0]
    values = [combined_distance(0.2, base + [d, 0], p2, T, 2.0) for d in (0, 0.5, 1, 3)]
    assert values == sorted(values) and len(set(values)) == 4
    assert combined_distance(0.1, base, p2, T, 2.0) < combined_distance(0.3, base, p2, T, 2.0)
    assert abs(combined_distance(0.2, base + [1, 0], p2, T, 2.0)
               - (0.2 + 500 / (2 + 1e-5))) < 1e-9
    mat = combined_distance(np.zeros((1, 1)), base[None], p2[None], T, 2.0)
    assert mat.shape == (1, 1)


def test_overlap_regions_agree():
    T = RigidTransform(0.2, 10.0, -15.0)
    r = np.random.default_rng(0)
    pts2 = r.uniform(-20, 120, (500, 2))
    in2 = overlap_region2((100, 100), (90, 110), T)(pts2)
    in1 = overlap_region((100, 100), (90, 110), T)(T.apply(pts2))
    assert np.array_equal(in1, in2) and in1.any() and not in1.all()


@pytest.fixture(scope="module")
def warped_pair():
    m = gen_master(SynthConfig(size=(160, 160)), np.random.default_rng(3))
    T = RigidTransform.about(math.radians(8), (80, 80), (6.0, -9.0))
    img2 = warp_rigid(m.image, T.inverse())
    p2 = T.inverse().apply(m.pores)
    ok = (p2.min(axis=1) >= 0) & (p2.max(axis=1) <= 159)
    return enhance(m.image), enhance(img2), m.pores, p2[ok], T


def test_align_pair_recovers_warp(warped_pair):
    e1, e2, p1, p2, T = warped_pair
    st_ = align_pair(e1, e2, p1, p2)
    assert abs(st_.transform.angle - T.angle) < 0.01
    assert np.abs(st_.transform.translation - T.translation).max() < 1.0
    assert len(st_.history) == st_.iteration + 1 and st_.history[-1] == st_.mse
    again = align_pair(e1, e2, p1, p2)
    assert again.matches == st_.matches and again.transform == st_.transform


def test_align_pair_failures(rng):
    img = rng.random((40, 40)).astype(np.float32)
    with pytest.raises(AlignmentFailedError):
        align_pair(img, img, [[10.0, 10.0]], [[10.0, 10.0], [20.0, 20.0]])
    flat = np.zeros((40, 40), np.float32)
    with pytest.raises(AlignmentFailedError):
        align_pair(flat, flat, [[10.0, 10.0], [20.0, 20.0]], [[10.0, 10.0], [20.0, 20.0]])


def test_patch_set_invariants():
    p = np.zeros((3, 33, 33), np.float32)
    with pytest.raises(ValueError):
        AnnotatedPatchSet(p, [0, 0, 1], [0, 0, 0], [0, 1, 0])
    with pytest.raises(ValueError):
        AnnotatedPatchSet(p[:2], [0, 0], [0, 1], [0, 1])
    ok = AnnotatedPatchSet(p[:2], [4, 4], [1, 1], [0, 1], np.zeros((2, 2)))
    assert ok.identities.tolist() == [4]


@pytest.fixture(scope="module")
def annotated():
    cfg = SynthConfig(size=(192, 192), margin=40, per_session=2)
    subj = gen_subject(cfg, np.random.default_rng(11))
    imgs = [imp.image for imp in subj.impressions]
    pores = [imp.pores for imp in subj.impressions]
    ps, transforms = annotate_subject(imgs, pores, 7, first_label=100)
    return subj, ps, transforms


def test_annotation_labels_follow_true_pores(annotated):
    subj, ps, transforms = annotated
    assert len(ps.identities) > 20
    assert ps.labels.min() == 100 and np.all(ps.subjects == 7)
    ref = subj.impressions[0]
    correct = 0
    for lab in ps.identities:
        rows = np.nonzero(ps.labels == lab)[0]
        c0 = ps.centers[rows[ps.sources[rows] == 0][0]]
        pid = ref.pore_ids[np.argmin(np.linalg.norm(ref.pores - c0, axis=1))]
        good = True
        for r in rows:
            imp = subj.impressions[ps.sources[r]]
            k = np.nonzero(imp.pore_ids == pid)[0]
            if not len(k) or np.linalg.norm(imp.pores[k[0]] - ps.centers[r]) > 3:
                good = False
        correct += good
    assert correct / len(ps.identities) >= 0.9


def test_annotation_file_roundtrip(tmp_path, annotated):
    _, ps, _ = annotated
    ps.save(tmp_path / "a.pknn")
    back = AnnotatedPatchSet.load(tmp_path / "a.pknn")
    assert np.array_equal(back.labels, ps.labels)
    assert np.array_equal(back.patches, ps.patches)
    assert back.patches.shape[1:] == (33, 33)


def test_identity_dataset_labels_disjoint(annotated):
    subj, ps, _ = annotated
    entries = [(imp.image, imp.pores) for imp in subj.impressions[:2]]
    ds = build_identity_dataset({"a": entries, "b": entries, "c": entries[:1]})
    a = set(ds.labels[ds.subjects == 0])
    b = set(ds.labels[ds.subjects == 1])
    assert a and b and not a & b
    assert set(np.unique(ds.subjects)) == {0, 1}


def test_overlap_half_strip_exhaustive():
    n = 12
    rows, cols = np.mgrid[0:n, 0:n]
    grid = np.stack([rows.ravel(), cols.ravel()], 1).astype(float)
    assert overlap_region((n, n), (n, n), RigidTransform(0.0, 0.0, 0.0))(grid).all()
    assert not overlap_region((n, n), (n, n), RigidTransform(0.0, 0.0, float(n)))(grid).any()
    T = RigidTransform(0.0, 0.0, n / 2)
    got = overlap_region((n, n), (n, n), T)(grid)
    for (r, c), flag in zip(grid, got):
        back = (r, c - n / 2)
        expected = 0 <= back[0] <= n - 1 and 0 <= back[1] <= n - 1
        assert flag == expected
    assert got.sum() == n * (n // 2)
