"""Diagonal-covariance Gaussian mixture math and EM fitting.

All likelihood computation happens in the log domain in float64. The
scalar operations are thin views over the same batched kernels, so a
one-row batch and a scalar call produce bitwise-identical results.

Two gradients of the per-filter penalty are exposed: the training-time
approximation that differentiates only the best-scoring component's
quadratic form, and the exact responsibility-weighted gradient used for
verification.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import MonotonicityError, SizeConstraintError, ValidationError
from .stats import as_matrix, kmeans_fit, assign
from .tensorio import GmmFile, read_gmm, write_gmm

LOG_2PI = math.log(2.0 * math.pi)
VARIANCE_FLOOR = 1e-6

_CHUNK_ROWS = 2048


@dataclass
class GaussianMixture:
    weights: np.ndarray    # (K,) nonnegative, sums to 1
    means: np.ndarray      # (K, dim)
    variances: np.ndarray  # (K, dim) diagonal covariances

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def validate(self, floor: float = VARIANCE_FLOOR):
        if abs(float(self.weights.sum()) - 1.0) > 1e-12:
            raise ValidationError(f"weights sum to {self.weights.sum()!r}")
        if np.any(self.weights < 0):
            raise ValidationError("negative mixture weight")
        if np.any(self.variances < floor):
            raise ValidationError(f"variance below floor {floor}")
        if self.means.shape != self.variances.shape:
            raise ValidationError("means/variances shape mismatch")

    def to_file(self) -> GmmFile:
        return GmmFile(
            dim=self.dim,
            weights=self.weights.copy(),
            means=self.means.copy(),
            variances=self.variances.copy(),
        )

    @classmethod
    def from_file(cls, f: GmmFile) -> "GaussianMixture":
        return cls(weights=f.weights, means=f.means, variances=f.variances)

    def save(self, path):
        write_gmm(self.to_file(), path)

    @classmethod
    def load(cls, path) -> "GaussianMixture":
        return cls.from_file(read_gmm(path))


@dataclass
class EmConfig:
    k: int = 64
    max_iters: int = 200
    rel_tol: float = 1e-7
    seed: int = 0
    variance_floor: float = VARIANCE_FLOOR

    def validate(self):
        if self.k < 1 or self.max_iters < 1:
            raise ValidationError("k and max_iters must be positive")
        if self.rel_tol <= 0 or self.variance_floor <= 0:
            raise ValidationError("rel_tol and variance_floor must be positive")


# ---------------------------------------------------------------------------
# Log-domain kernels

def logsumexp(a: np.ndarray, axis=-1) -> np.ndarray:
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - amax), axis=axis)) + np.squeeze(amax, axis=axis)
    return out


def _log_gauss_matrix(X: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """(N, K) log densities of diagonal Gaussians, fully in the log domain."""
    d = X.shape[1]
    diff = X[:, None, :] - means[None, :, :]
    maha = np.sum(diff * diff / variances[None, :, :], axis=2)
    logdet = np.sum(np.log(variances), axis=1)
    return -0.5 * (d * LOG_2PI + logdet[None, :] + maha)


def _log_weights(m: GaussianMixture) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(m.weights)


def _log_joint(X: np.ndarray, m: GaussianMixture) -> np.ndarray:
    """(N, K) log of pi_k times the k-th component density."""
    if X.shape[1] != m.dim:
        raise ValidationError(f"vector dim {X.shape[1]} != mixture dim {m.dim}")
    return _log_gauss_matrix(X, m.means, m.variances) + _log_weights(m)[None, :]


def _as_vector(w, dim=None) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1:
        raise ValidationError(f"expected a vector, got shape {w.shape}")
    if dim is not None and w.shape[0] != dim:
        raise ValidationError(f"vector dim {w.shape[0]} != expected {dim}")
    return w


# ---------------------------------------------------------------------------
# Densities and gradients

def gaussian_logpdf(w, mu, var) -> float:
    """log N(w | mu, diag(var)); safe for exponents far below underflow."""
    w = _as_vector(w)
    mu = _as_vector(mu, w.shape[0])
    var = _as_vector(var, w.shape[0])
    if np.any(var <= 0):
        raise ValidationError("nonpositive variance")
    return float(_log_gauss_matrix(w[None, :], mu[None, :], var[None, :])[0, 0])


def gmm_logpdf(w, m: GaussianMixture) -> float:
    """log sum_k pi_k N(w | mu_k, var_k) via log-sum-exp."""
    w = _as_vector(w, m.dim)
    return float(logsumexp(_log_joint(w[None, :], m), axis=1)[0])


def nll(w, m: GaussianMixture) -> float:
    """Per-filter penalty: the negative log mixture likelihood."""
    return -gmm_logpdf(w, m)


def batch_logpdf(X, m: GaussianMixture) -> np.ndarray:
    """(N,) log mixture densities, chunked to bound memory."""
    X = as_matrix(X)
    out = np.empty(X.shape[0])
    for s in range(0, X.shape[0], _CHUNK_ROWS):
        e = min(s + _CHUNK_ROWS, X.shape[0])
        out[s:e] = logsumexp(_log_joint(X[s:e], m), axis=1)
    return out


def nll_total(bank, m: GaussianMixture) -> float:
    """Total penalty over a bank, accumulated with compensated summation."""
    X = as_matrix(bank)
    if X.shape[0] == 0:
        return 0.0
    return math.fsum((-batch_logpdf(X, m)).tolist())


def responsibilities(w, m: GaussianMixture) -> np.ndarray:
    """Posterior component probabilities for one filter; sums to 1."""
    w = _as_vector(w, m.dim)
    lj = _log_joint(w[None, :], m)[0]
    r = np.exp(lj - logsumexp(lj))
    return r / r.sum()


def select_component(w, m: GaussianMixture) -> int:
    """Index maximizing pi_k N(w | mu_k, var_k); ties to the lowest index."""
    w = _as_vector(w, m.dim)
    return int(np.argmax(_log_joint(w[None, :], m)[0]))


def _component_grads(w: np.ndarray, m: GaussianMixture) -> np.ndarray:
    """(K, dim) rows of (w - mu_k) / var_k."""
    return (w[None, :] - m.means) / m.variances


def grad_approx(w, m: GaussianMixture) -> np.ndarray:
    """Training-time gradient: only the best-scoring component's term."""
    w = _as_vector(w, m.dim)
    return _component_grads(w, m)[select_component(w, m)]


def grad_exact(w, m: GaussianMixture) -> np.ndarray:
    """Exact penalty gradient: responsibility-weighted component terms."""
    w = _as_vector(w, m.dim)
    r = responsibilities(w, m)
    return (r[:, None] * _component_grads(w, m)).sum(axis=0)


def batch_grad(X, m: GaussianMixture, mode: str = "approximate") -> np.ndarray:
    """(N, dim) penalty gradients for a batch of filters."""
    X = as_matrix(X)
    if X.shape[1] != m.dim:
        raise ValidationError(f"vector dim {X.shape[1]} != mixture dim {m.dim}")
    if mode not in ("approximate", "exact"):
        raise ValidationError(f"unknown gradient mode {mode!r}")
    out = np.empty_like(X)
    for s in range(0, X.shape[0], _CHUNK_ROWS):
        e = min(s + _CHUNK_ROWS, X.shape[0])
        chunk = X[s:e]
        lj = _log_joint(chunk, m)
        comp = (chunk[:, :, None] - m.means.T[None, :, :]) / m.variances.T[None, :, :]
        if mode == "approximate":
            sel = np.argmax(lj, axis=1)
            out[s:e] = comp[np.arange(chunk.shape[0]), :, sel]
        else:
            r = np.exp(lj - logsumexp(lj, axis=1)[:, None])
            r /= r.sum(axis=1, keepdims=True)
            out[s:e] = np.einsum("nk,ndk->nd", r, comp)
    return out


def sample_mixture(m: GaussianMixture, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n samples from the mixture (component choice then Gaussian)."""
    comp = rng.choice(m.k, size=n, p=m.weights / m.weights.sum())
    noise = rng.standard_normal((n, m.dim))
    return m.means[comp] + noise * np.sqrt(m.variances[comp])


# ---------------------------------------------------------------------------
# EM fitting

@dataclass
class EmIteration:
    index: int
    log_likelihood: float
    reseeded: tuple[int, ...] = ()  # components re-seeded just before this E-step


def _estep_stats(X: np.ndarray, m: GaussianMixture):
    """One E-step pass: data log-likelihood, per-sample log density, and
    sufficient statistics (gamma sums, gamma-weighted first/second moments)."""
    n, d = X.shape
    nk = np.zeros(m.k)
    sx = np.zeros((m.k, d))
    sxx = np.zeros((m.k, d))
    per_sample = np.empty(n)
    for s in range(0, n, _CHUNK_ROWS):
        e = min(s + _CHUNK_ROWS, n)
        chunk = X[s:e]
        lj = _log_joint(chunk, m)
        lse = logsumexp(lj, axis=1)
        per_sample[s:e] = lse
        r = np.exp(lj - lse[:, None])
        r /= r.sum(axis=1, keepdims=True)
        nk += r.sum(axis=0)
        sx += r.T @ chunk
        sxx += r.T @ (chunk * chunk)
    ll = math.fsum(per_sample.tolist())
    return ll, per_sample, nk, sx, sxx


def _reseed_collapsed(m: GaussianMixture, X, per_sample_ll, floor, threshold):
    """Move components with negligible weight onto the worst-fit samples."""
    collapsed = np.flatnonzero(m.weights < threshold)
    if collapsed.size == 0:
        return ()
    n = X.shape[0]
    worst = np.argsort(per_sample_ll, kind="stable")
    for j, c in enumerate(collapsed):
        idx = worst[j % n]
        m.means[c] = X[idx]
        m.variances[c] = floor
        m.weights[c] = 1.0 / n
    m.weights /= m.weights.sum()
    return tuple(int(c) for c in collapsed)


def _init_from_kmeans(X: np.ndarray, cfg: EmConfig) -> GaussianMixture:
    km = kmeans_fit(X, cfg.k, cfg.seed)
    labels = assign(km, X)
    counts = np.bincount(labels, minlength=cfg.k).astype(np.float64)
    weights = counts / counts.sum()
    variances = np.full((cfg.k, X.shape[1]), cfg.variance_floor)
    for c in range(cfg.k):
        members = X[labels == c]
        if members.shape[0]:
            diff = members - km.centroids[c]
            variances[c] = np.maximum((diff * diff).mean(axis=0), cfg.variance_floor)
    return GaussianMixture(weights=weights, means=km.centroids.copy(), variances=variances)


def em_fit_trace(bank, cfg: EmConfig):
    """EM with k-means warm start; returns (model, per-iteration trace).

    The trace holds one data log-likelihood per E-step. Outside iterations
    that follow a component re-seed, the log-likelihood must be
    non-decreasing within 1e-9 relative slack, else MonotonicityError.
    Convergence: relative log-likelihood change <= cfg.rel_tol.
    """
    cfg.validate()
    X = as_matrix(bank)
    n = X.shape[0]
    if n < cfg.k:
        raise SizeConstraintError(f"need at least k={cfg.k} samples, bank has {n}")
    if not np.all(np.isfinite(X)):
        raise ValidationError("bank contains non-finite values")

    model = _init_from_kmeans(X, cfg)
    threshold = 1.0 / (10.0 * n)
    # a cluster-proportion init can already be degenerate; apply the same
    # re-seed policy before the first E-step
    reseeded = _reseed_collapsed(model, X, np.zeros(n), cfg.variance_floor, threshold)

    trace: list[EmIteration] = []
    ll_prev = None
    suspended = bool(reseeded)
    for t in range(cfg.max_iters):
        ll, per_sample, nk, sx, sxx = _estep_stats(X, model)
        trace.append(EmIteration(index=t, log_likelihood=ll, reseeded=reseeded))
        if ll_prev is not None and not suspended:
            if ll < ll_prev - 1e-9 * abs(ll_prev):
                raise MonotonicityError(
                    f"EM log-likelihood fell at iteration {t}: {ll_prev} -> {ll}"
                )
            if abs(ll - ll_prev) <= cfg.rel_tol * abs(ll_prev):
                break
        # M-step (diagonal covariances)
        nk_safe = np.maximum(nk, 1e-300)
        model.weights = nk / n
        model.weights /= model.weights.sum()
        model.means = sx / nk_safe[:, None]
        second = sxx / nk_safe[:, None] - model.means**2
        model.variances = np.maximum(second, cfg.variance_floor)
        reseeded = _reseed_collapsed(model, X, per_sample, cfg.variance_floor, threshold)
        suspended = bool(reseeded)
        ll_prev = ll

    model.validate(floor=cfg.variance_floor)
    return model, trace


def em_fit(bank, cfg: EmConfig) -> GaussianMixture:
    """Fit a diagonal-covariance mixture; see em_fit_trace for the protocol."""
    model, _ = em_fit_trace(bank, cfg)
    return model
