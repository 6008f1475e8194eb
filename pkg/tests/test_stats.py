"""Clustering and report-artifact tests.

Oracles: brute-force nearest-centroid scans, two-pass covariance
computation, and hand-computed PGM byte strings.
"""

import numpy as np
import pytest

from filterprior.errors import EmptyBankError, SizeConstraintError, ValidationError
from filterprior.stats import (
    KMeansModel,
    as_matrix,
    assign,
    cluster_moments,
    grid_to_pgm_bytes,
    kmeans_fit,
    render_report,
)
from filterprior.tensorio import FilterBank, FilterMeta


def two_blobs(rng, n_per=200, spread=0.2, dim=9):
    a = rng.standard_normal((n_per, dim)) * spread + 3.0
    b = rng.standard_normal((n_per, dim)) * spread - 3.0
    return np.vstack([a, b])


def brute_nearest(X, centroids):
    idx = np.empty(X.shape[0], dtype=np.int64)
    for i in range(X.shape[0]):
        d2 = [float(np.sum((X[i] - c) ** 2)) for c in centroids]
        best = 0
        for j in range(1, len(d2)):
            if d2[j] < d2[best]:
                best = j
        idx[i] = best
    return idx


def test_as_matrix_accepts_bank_and_arrays():
    vecs = np.arange(18, dtype=np.float64).reshape(2, 9)
    bank = FilterBank(vectors=vecs, meta=[FilterMeta("t", 0, 0), FilterMeta("t", 1, 0)])
    assert as_matrix(bank) is bank.vectors
    out = as_matrix([[1.0, 2.0], [3.0, 4.0]])
    assert out.dtype == np.float64 and out.shape == (2, 2)


def test_kmeans_recovers_two_blobs(rng):
    X = two_blobs(rng)
    model = kmeans_fit(X, 2, seed=0)
    order = np.argsort(model.centroids[:, 0])
    lo, hi = model.centroids[order[0]], model.centroids[order[1]]
    assert np.all(np.abs(lo + 3.0) < 0.1)
    assert np.all(np.abs(hi - 3.0) < 0.1)
    # distortion is the within-blob scatter, far below the blob separation
    assert model.distortion < 9 * 0.2**2 * 2
    assert model.seed == 0


def test_kmeans_centroids_are_cluster_means(rng):
    X = two_blobs(rng)
    model = kmeans_fit(X, 2, seed=3)
    labels = assign(model, X)
    for c in range(2):
        mu = X[labels == c].mean(axis=0)
        assert np.max(np.abs(mu - model.centroids[c])) < 1e-10


def test_assign_matches_bruteforce(rng):
    X = rng.standard_normal((257, 9))
    centroids = rng.standard_normal((7, 9))
    model = KMeansModel(centroids=centroids, seed=0, distortion=0.0)
    assert np.array_equal(assign(model, X), brute_nearest(X, centroids))


def test_assign_ties_break_to_lowest_index():
    centroids = np.vstack([np.zeros(9), np.ones(9)])
    model = KMeansModel(centroids=centroids, seed=0, distortion=0.0)
    midpoint = np.full((1, 9), 0.5)  # exactly equidistant in float64
    assert assign(model, midpoint)[0] == 0


def test_assign_dim_mismatch():
    model = KMeansModel(centroids=np.zeros((2, 9)), seed=0, distortion=0.0)
    with pytest.raises(ValidationError):
        assign(model, np.zeros((3, 4)))


def test_kmeans_determinism_and_final_distortion(rng):
    X = rng.standard_normal((400, 9))
    a = kmeans_fit(X, 10, seed=42)
    b = kmeans_fit(X, 10, seed=42)
    assert np.array_equal(a.centroids, b.centroids)
    assert a.distortion == b.distortion
    # reported distortion is the mean squared distance under the final model
    labels = assign(a, X)
    d2 = np.sum((X - a.centroids[labels]) ** 2, axis=1)
    assert a.distortion == pytest.approx(float(d2.mean()), rel=1e-12)


def test_kmeans_seeds_vary_but_all_terminate(rng):
    X = rng.standard_normal((300, 9))
    for seed in range(10):
        model = kmeans_fit(X, 8, seed=seed)
        assert model.centroids.shape == (8, 9)
        assert np.isfinite(model.distortion)


def test_kmeans_k_equals_n():
    X = np.arange(45, dtype=np.float64).reshape(5, 9)
    model = kmeans_fit(X, 5, seed=1)
    assert model.distortion == 0.0
    assert {tuple(c) for c in model.centroids} == {tuple(r) for r in X}


def test_kmeans_duplicate_points_terminate():
    X = np.vstack([np.zeros((3, 9)), np.ones((1, 9))])
    model = kmeans_fit(X, 3, seed=0)
    assert model.distortion == 0.0


def test_kmeans_errors():
    with pytest.raises(EmptyBankError):
        kmeans_fit(np.empty((0, 9)), 2, seed=0)
    with pytest.raises(ValidationError):
        kmeans_fit(np.zeros((5, 9)), 0, seed=0)
    with pytest.raises(SizeConstraintError):
        kmeans_fit(np.zeros((3, 9)), 4, seed=0)


def test_cluster_moments_against_two_pass_oracle(rng):
    X = rng.standard_normal((120, 9))
    labels = rng.integers(0, 4, size=120)
    report = cluster_moments(X, labels, k=4)
    assert report.histogram.sum() == 120
    for c in range(4):
        members = X[labels == c]
        assert report.histogram[c] == members.shape[0]
        assert np.allclose(report.means[c], members.mean(axis=0), atol=1e-14)
        oracle = np.cov(members.T, bias=True)
        assert np.allclose(report.covariances[c], oracle, atol=1e-12)
        assert np.array_equal(report.covariances[c], report.covariances[c].T)


def test_cluster_moments_empty_cluster():
    X = np.arange(27, dtype=np.float64).reshape(3, 9)
    report = cluster_moments(X, [0, 0, 1], k=3)
    assert report.empty == (2,)
    assert np.all(report.means[2] == 0.0)
    assert np.all(report.covariances[2] == 0.0)
    assert list(report.histogram) == [2, 1, 0]


def test_cluster_moments_rejects_bad_assignments():
    X = np.zeros((3, 9))
    with pytest.raises(ValidationError):
        cluster_moments(X, [0, 1], k=2)
    with pytest.raises(ValidationError):
        cluster_moments(X, [0, 1, 5], k=2)
    with pytest.raises(ValidationError):
        cluster_moments(X, [0, -1, 0], k=2)


def test_pgm_bytes_frozen_oracle():
    grid = np.arange(9, dtype=np.float64).reshape(3, 3)
    data = grid_to_pgm_bytes(grid)
    # min-max scaling of 0..8 onto 0..255, rounded half to even
    expected = b"P5\n3 3\n255\n" + bytes([0, 32, 64, 96, 128, 159, 191, 223, 255])
    assert data == expected


def test_pgm_constant_grid_is_mid_gray():
    data = grid_to_pgm_bytes(np.full((3, 3), 7.25))
    assert data == b"P5\n3 3\n255\n" + bytes([128] * 9)


def test_render_report_file_set(tmp_path):
    X = np.arange(27, dtype=np.float64).reshape(3, 9)
    report = cluster_moments(X, [0, 0, 1], k=3)
    written = render_report(report, tmp_path / "out")
    names = sorted(p.name for p in written)
    assert names == [
        "cluster_00_cov.csv", "cluster_00_mean.csv", "cluster_00_mean.pgm",
        "cluster_01_cov.csv", "cluster_01_mean.csv", "cluster_01_mean.pgm",
        "cluster_02_cov.csv", "cluster_02_mean.csv", "cluster_02_mean.pgm",
        "histogram.csv",
    ]
    assert (tmp_path / "out" / "histogram.csv").read_text() == "2,1,0\n"
    cov0 = (tmp_path / "out" / "cluster_00_cov.csv").read_text().strip().split("\n")
    assert len(cov0) == 9 and all(len(row.split(",")) == 9 for row in cov0)
    mean0 = (tmp_path / "out" / "cluster_00_mean.csv").read_text().strip().split("\n")
    assert len(mean0) == 3 and all(len(row.split(",")) == 3 for row in mean0)


def test_render_report_csv_roundtrips_float64(tmp_path, rng):
    X = rng.standard_normal((40, 9))
    labels = rng.integers(0, 2, size=40)
    report = cluster_moments(X, labels, k=2)
    render_report(report, tmp_path)
    rows = (tmp_path / "cluster_00_mean.csv").read_text().strip().split("\n")
    parsed = np.array([[float(v) for v in row.split(",")] for row in rows])
    assert np.array_equal(parsed.ravel(), report.means[0])


def test_render_report_deterministic(tmp_path, rng):
    X = rng.standard_normal((64, 9))
    labels = assign(kmeans_fit(X, 4, seed=9), X)
    report = cluster_moments(X, labels, k=4)
    a = render_report(report, tmp_path / "a")
    b = render_report(report, tmp_path / "b")
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()
