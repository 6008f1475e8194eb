"""Filter-population analysis: k-means clustering, per-cluster moments,
and the CSV/PGM report artifacts derived from them.

Distances are plain Euclidean on the raw 9-vectors; no normalization is
applied before clustering. All randomness flows through a seeded
numpy Generator, so identical seeds give identical models.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyBankError, InvariantViolation, SizeConstraintError, ValidationError
from .tensorio import FilterBank, fmt_real

_CHUNK_ROWS = 2048


def as_matrix(bank) -> np.ndarray:
    """Accept a FilterBank or a raw (N, dim) array; return float64 matrix."""
    if isinstance(bank, FilterBank):
        return bank.vectors
    return np.atleast_2d(np.asarray(bank, dtype=np.float64))


@dataclass
class KMeansModel:
    centroids: np.ndarray  # (K, dim)
    seed: int
    distortion: float      # mean squared distance to assigned centroid

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass
class ClusterReport:
    assignments: np.ndarray   # (N,) ints in [0, K)
    histogram: np.ndarray     # (K,) counts summing to N
    means: np.ndarray         # (K, dim)
    covariances: np.ndarray   # (K, dim, dim) symmetric PSD
    empty: tuple[int, ...] = ()

    @property
    def k(self) -> int:
        return self.histogram.shape[0]


def _nearest(X: np.ndarray, centroids: np.ndarray):
    """Index and squared distance of the nearest centroid per sample.

    Uses explicit differences (not the norm-expansion trick) so exact ties
    resolve identically to a brute-force scan; argmin breaks ties toward
    the lowest centroid index.
    """
    n = X.shape[0]
    idx = np.empty(n, dtype=np.int64)
    dmin = np.empty(n, dtype=np.float64)
    for s in range(0, n, _CHUNK_ROWS):
        e = min(s + _CHUNK_ROWS, n)
        diff = X[s:e, None, :] - centroids[None, :, :]
        d2 = np.sum(diff * diff, axis=2)
        idx[s:e] = np.argmin(d2, axis=1)
        dmin[s:e] = d2[np.arange(e - s), idx[s:e]]
    return idx, dmin


def _kmeanspp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centroids = np.empty((k, X.shape[1]), dtype=np.float64)
    centroids[0] = X[rng.integers(n)]
    if k == 1:
        return centroids
    _, dmin = _nearest(X, centroids[:1])
    for j in range(1, k):
        total = dmin.sum()
        if total > 0:
            nxt = rng.choice(n, p=dmin / total)
        else:
            nxt = rng.integers(n)  # all points already covered
        centroids[j] = X[nxt]
        diff = X - centroids[j]
        dmin = np.minimum(dmin, np.sum(diff * diff, axis=1))
    return centroids


def kmeans_fit(bank, k: int, seed: int, max_iters: int = 100) -> KMeansModel:
    """Lloyd's algorithm from k-means++ seeding, deterministic per seed.

    Terminates when assignments stabilize or after max_iters updates.
    Empty clusters are re-seeded to the sample currently farthest from its
    assigned centroid. The per-iteration distortion trace is asserted
    non-increasing (1e-12 relative slack for rounding).
    """
    X = as_matrix(bank)
    n = X.shape[0]
    if n == 0:
        raise EmptyBankError("cannot cluster an empty bank")
    if k < 1:
        raise ValidationError(f"k must be positive, got {k}")
    if n < k:
        raise SizeConstraintError(f"need at least k={k} samples, bank has {n}")

    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(X, k, rng)
    prev_assign = None
    prev_distortion = np.inf
    for _ in range(max_iters):
        assign_now, dmin = _nearest(X, centroids)
        distortion = float(dmin.mean())
        if distortion > prev_distortion * (1 + 1e-12) + 1e-300:
            raise InvariantViolation(
                f"k-means distortion increased: {prev_distortion} -> {distortion}"
            )
        prev_distortion = distortion
        if prev_assign is not None and np.array_equal(assign_now, prev_assign):
            break
        prev_assign = assign_now
        counts = np.bincount(assign_now, minlength=k)
        sums = np.zeros((k, X.shape[1]))
        np.add.at(sums, assign_now, X)
        empty = np.flatnonzero(counts == 0)
        nonzero = counts > 0
        centroids[nonzero] = sums[nonzero] / counts[nonzero, None]
        if empty.size:
            worst = np.argsort(dmin, kind="stable")[::-1]
            for j, c in enumerate(empty):
                centroids[c] = X[worst[j % n]]

    _, dmin = _nearest(X, centroids)
    return KMeansModel(centroids=centroids, seed=seed, distortion=float(dmin.mean()))


def assign(model: KMeansModel, bank) -> np.ndarray:
    """Map each sample to its nearest centroid (ties to the lowest index)."""
    X = as_matrix(bank)
    if X.shape[1] != model.dim:
        raise ValidationError(f"bank dim {X.shape[1]} != model dim {model.dim}")
    idx, _ = _nearest(X, model.centroids)
    return idx


def cluster_moments(bank, assignments, k: int | None = None) -> ClusterReport:
    """Per-cluster mean and population covariance (divide by n, not n-1).

    Empty clusters get zero mean/covariance and are listed in `empty`.
    """
    X = as_matrix(bank)
    assignments = np.asarray(assignments, dtype=np.int64)
    if assignments.shape[0] != X.shape[0]:
        raise ValidationError("assignments length does not match bank size")
    if assignments.size and assignments.min() < 0:
        raise ValidationError("negative cluster index")
    if k is None:
        k = int(assignments.max()) + 1 if assignments.size else 1
    if assignments.size and assignments.max() >= k:
        raise ValidationError(f"assignment index {assignments.max()} >= k={k}")

    dim = X.shape[1]
    histogram = np.bincount(assignments, minlength=k)
    means = np.zeros((k, dim))
    covariances = np.zeros((k, dim, dim))
    empty = []
    for c in range(k):
        members = X[assignments == c]
        if members.shape[0] == 0:
            empty.append(c)
            continue
        mu = members.mean(axis=0)
        diff = members - mu
        cov = diff.T @ diff / members.shape[0]
        means[c] = mu
        covariances[c] = (cov + cov.T) / 2.0
    return ClusterReport(
        assignments=assignments,
        histogram=histogram,
        means=means,
        covariances=covariances,
        empty=tuple(empty),
    )


# ---------------------------------------------------------------------------
# Report artifacts

def _write_csv_matrix(path: Path, rows):
    text = "\n".join(",".join(fmt_real(v) for v in row) for row in rows)
    path.write_text(text + "\n")


def grid_to_pgm_bytes(grid: np.ndarray) -> bytes:
    """Render a tiny grid as a binary PGM (P5) with per-grid min-max scaling.

    A constant grid maps to mid-gray 128.
    """
    grid = np.asarray(grid, dtype=np.float64)
    vmin, vmax = float(grid.min()), float(grid.max())
    if vmax > vmin:
        pix = np.rint((grid - vmin) / (vmax - vmin) * 255.0)
    else:
        pix = np.full_like(grid, 128.0)
    pix = np.clip(pix, 0, 255).astype(np.uint8)
    h, w = grid.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes(order="C")


def render_report(report: ClusterReport, out_dir) -> list[Path]:
    """Write histogram, per-cluster covariance CSVs, and mean grids (CSV+PGM).

    Output bytes are a deterministic function of the report.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    width = max(2, len(str(report.k - 1)))

    hist_path = out / "histogram.csv"
    hist_path.write_text(",".join(str(int(c)) for c in report.histogram) + "\n")
    written.append(hist_path)

    side = int(round(np.sqrt(report.means.shape[1])))
    for c in range(report.k):
        tag = f"cluster_{c:0{width}d}"
        cov_path = out / f"{tag}_cov.csv"
        _write_csv_matrix(cov_path, report.covariances[c])
        written.append(cov_path)

        grid = report.means[c].reshape(side, side)
        mean_path = out / f"{tag}_mean.csv"
        _write_csv_matrix(mean_path, grid)
        written.append(mean_path)

        pgm_path = out / f"{tag}_mean.pgm"
        pgm_path.write_bytes(grid_to_pgm_bytes(grid))
        written.append(pgm_path)
    return written
