import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from text2face import autodiff as ad
from text2face.errors import DataError, NumericError
from text2face.metrics import (FEATURE_SIZE, FidStats, face_features, fid, fid_from_stats, format_report, fsd,
                               fss, matrix_sqrt_psd, paired)
from text2face.perceptual import extract_features, extractor_init


def random_spd(rng, d):
    a = rng.normal(size=(d, d))
    return a @ a.T + d * 1e-2 * np.eye(d)


def rotation(theta):
    return np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])


@pytest.fixture(scope="module")
def fe():
    return extractor_init(0)


def test_face_features_deterministic(fe):
    img = np.random.default_rng(0).uniform(-1, 1, size=(2, 3, 8, 8))
    a, b = face_features(img, fe), face_features(img, fe)
    assert a.shape == (2, 64)
    assert np.array_equal(a, b)


def test_face_features_constant_image(fe):
    img = np.full((3, 16, 16), 0.3)
    img[1] = -0.2
    vec = face_features(img, fe)[0]
    big = ad.bilinear_resize(ad.Tensor(img[None]), (FEATURE_SIZE, FEATURE_SIZE))
    assert big.shape == (1, 3, 299, 299)
    fmap = extract_features(fe, big, ["conv5_3"])["conv5_3"].data[0]
    np.testing.assert_allclose(vec, fmap[:, 0, 0], rtol=1e-12)
    np.testing.assert_allclose(vec, fmap[:, -1, 3], rtol=1e-12)


def test_fsd_hand_examples():
    assert fsd([((0, 0), (3, 4)), ((0, 0), (0, 0))]) == 2.5
    assert fsd([((1, 0), (0, 1))]) == pytest.approx(np.sqrt(2), abs=1e-12)
    assert fsd([((1, 2, 3), (1, 2, 3))] * 3) == 0.0


def test_fsd_mean_abs_mode():
    assert fsd([((0, 0), (3, 4))], mode="mean_abs") == 3.5
    with pytest.raises(ValueError):
        fsd([((0,), (1,))], mode="l1")


def test_fss_hand_examples():
    v = np.array([0.3, -2.0, 5.0])
    assert fss([(v, v)]) == pytest.approx(1.0, abs=1e-12)
    assert fss([(v, -v)]) == pytest.approx(-1.0, abs=1e-12)
    assert fss([((1, 0), (1, 1))]) == pytest.approx(1 / np.sqrt(2), abs=1e-12)


def test_pair_metric_errors():
    with pytest.raises(DataError):
        fsd([])
    with pytest.raises(DataError):
        fss([((1, 0), (1, 0, 0))])
    with pytest.raises(NumericError):
        fss([((0, 0), (1, 0))])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_pair_metrics_ranges_and_permutation(seed):
    rng = np.random.default_rng(seed)
    pairs = [(rng.normal(size=5), rng.normal(size=5)) for _ in range(6)]
    perm = [pairs[i] for i in rng.permutation(6)]
    assert fsd(pairs) >= 0
    assert -1 <= fss(pairs) <= 1
    assert fsd(perm) == pytest.approx(fsd(pairs), rel=1e-12)
    assert fss(perm) == pytest.approx(fss(pairs), rel=1e-12, abs=1e-15)


def test_matrix_sqrt_simple_cases():
    np.testing.assert_allclose(matrix_sqrt_psd(np.eye(3)), np.eye(3), atol=1e-15)
    np.testing.assert_allclose(matrix_sqrt_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-14)


@pytest.mark.parametrize("seed", range(20))
def test_matrix_sqrt_reconstruction(seed):
    rng = np.random.default_rng(seed)
    a = random_spd(rng, 2 + seed % 9)
    s = matrix_sqrt_psd(a)
    assert np.linalg.norm(s @ s - a) / np.linalg.norm(a) < 1e-8
    np.testing.assert_allclose(s, scipy.linalg.sqrtm(a).real, rtol=1e-7, atol=1e-9)


def test_matrix_sqrt_commutes_with_orthogonal_similarity():
    rng = np.random.default_rng(3)
    a = random_spd(rng, 5)
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    lhs = matrix_sqrt_psd(q.T @ a @ q)
    rhs = q.T @ matrix_sqrt_psd(a) @ q
    assert np.max(np.abs(lhs - rhs)) < 1e-8


def test_matrix_sqrt_errors():
    with pytest.raises(NumericError):
        matrix_sqrt_psd(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(NumericError):
        matrix_sqrt_psd(np.diag([1.0, -0.5]))
    # tiny negative eigenvalues are clipped
    s = matrix_sqrt_psd(np.diag([1.0, -1e-12]))
    np.testing.assert_allclose(s, np.diag([1.0, 0.0]), atol=1e-15)


def test_fid_identical_sets():
    x = np.random.default_rng(0).normal(size=(50, 6))
    assert fid(x, x) < 1e-8


def test_fid_one_dimensional_closed_form():
    a = FidStats(np.array([0.0]), np.array([[1.0]]))
    b = FidStats(np.array([1.0]), np.array([[1.0]]))
    assert abs(fid_from_stats(a, b) - 1.0) < 1e-9
    c = FidStats(np.array([2.0]), np.array([[4.0]]))
    # (0-2)^2 + (1-2)^2
    assert abs(fid_from_stats(a, c) - 5.0) < 1e-9


def test_fid_identity_covariances():
    a = FidStats(np.zeros(2), np.eye(2))
    b = FidStats(np.array([3.0, 4.0]), np.eye(2))
    assert abs(fid_from_stats(a, b) - 25.0) < 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_fid_symmetric_and_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(40, 2)) * [1.0, 3.0]
    b = rng.normal(size=(30, 2)) + [0.5, -1.0]
    d = fid(a, b)
    assert d >= 0
    assert abs(d - fid(b, a)) < 1e-8
    r = rotation(rng.uniform(0, 2 * np.pi))
    assert abs(d - fid(a @ r.T, b @ r.T)) < 1e-6


def test_fid_matches_scipy_reference():
    rng = np.random.default_rng(8)
    a = rng.normal(size=(60, 4))
    b = rng.normal(size=(60, 4)) @ rng.normal(size=(4, 4)) + 1.0
    sa, sb = FidStats.from_features(a), FidStats.from_features(b)
    cross = scipy.linalg.sqrtm(sa.cov @ sb.cov).real
    ref = np.sum((sa.mu - sb.mu) ** 2) + np.trace(sa.cov + sb.cov - 2 * cross)
    assert fid(a, b) == pytest.approx(ref, rel=1e-8)


def test_fid_stats_covariance_definition():
    x = np.array([[0.0, 1.0], [2.0, 1.0], [4.0, 4.0]])
    s = FidStats.from_features(x, eps=0.0)
    np.testing.assert_allclose(s.cov, np.cov(x, rowvar=False), rtol=1e-14)
    t = FidStats.from_features(x)
    np.testing.assert_allclose(t.cov - s.cov, 1e-6 * np.eye(2), atol=1e-18)


def test_fid_errors():
    with pytest.raises(DataError):
        fid(np.zeros((1, 3)), np.zeros((5, 3)))
    with pytest.raises(DataError):
        fid(np.zeros((4, 3)), np.zeros((4, 2)))
    bad = FidStats(np.zeros(2), np.array([[1.0, 0.0], [0.0, -1.0]]))
    with pytest.raises(NumericError):
        fid_from_stats(bad, FidStats(np.zeros(2), np.eye(2)))


def test_paired_and_report():
    a = {"x": np.ones(2), "y": np.zeros(2)}
    b = {"y": np.ones(2), "x": np.ones(2)}
    pairs = paired(a, b)
    assert np.array_equal(pairs[1][1], np.ones(2))
    with pytest.raises(DataError, match="z"):
        paired({"z": np.ones(2)}, b)
    assert format_report([("fid", 0.1), ("n", 3)]) == "fid=0.1\nn=3\n"
