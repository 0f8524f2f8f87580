"""Dense linear algebra and clustering primitives shared by the rest of the lab.

Matrices are plain float64 numpy arrays (2-D, row-major). Everything here is a
pure function of its inputs, so concurrent callers need no locking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEGENERATE_VARIANCE = 1e-12


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite float64 2-D array, rejecting NaN/Inf with a diagnostic."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        bad = int(np.sum(~np.isfinite(a)))
        raise ValueError(f"{name} contains {bad} non-finite entries")
    return a


@dataclass
class SvdResult:
    """Thin SVD: U has left singular vectors as columns, Vt right ones as rows,
    S descending and non-negative."""

    U: np.ndarray
    S: np.ndarray
    Vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.Vt


def svd(m) -> SvdResult:
    """Singular value decomposition of a dense matrix.

    Returns the thin factorization; U diag(S) Vt reconstructs the input to
    ~1e-8 relative Frobenius error and U, V are column-orthonormal.
    """
    a = as_matrix(m)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    return SvdResult(U=u, S=s, Vt=vt)


def covariance(z) -> np.ndarray:
    """Population covariance of column vectors: (1/n) sum (z_i - mean)(z_i - mean)^T.

    `z` is d' x n with one representation per column; requires n >= 1.
    """
    a = as_matrix(z, "representations")
    n = a.shape[1]
    if n < 1:
        raise ValueError("covariance needs at least one column")
    centered = a - a.mean(axis=1, keepdims=True)
    sigma = centered @ centered.T / n
    # enforce exact symmetry against accumulation order noise
    return (sigma + sigma.T) / 2.0


def correlation_matrix(sigma) -> np.ndarray:
    """Correlation matrix R[i,j] = S[i,j] / sqrt(S[i,i] S[j,j]) of a covariance.

    Dimensions whose variance falls below 1e-12 are degenerate: their row and
    column (diagonal included) are zeroed, which marks them for downstream
    consumers. Asymmetric input is rejected.
    """
    s = as_matrix(sigma, "covariance")
    if s.shape[0] != s.shape[1]:
        raise ValueError(f"covariance must be square, got {s.shape}")
    scale = np.abs(s).max() if s.size else 0.0
    if not np.allclose(s, s.T, atol=1e-10 * max(scale, 1.0)):
        raise ValueError("covariance must be symmetric")
    var = np.diag(s).copy()
    ok = var >= DEGENERATE_VARIANCE
    denom = np.sqrt(np.where(ok, var, 1.0))
    r = s / denom[:, None] / denom[None, :]
    r[~ok, :] = 0.0
    r[:, ~ok] = 0.0
    idx = np.where(ok)[0]
    r[idx, idx] = 1.0
    return r


@dataclass
class KMeansResult:
    centroids: np.ndarray  # (k, dim)
    labels: np.ndarray  # (n,)
    inertia: float


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining mass at existing centroids; pick uniformly
            centroids[i] = points[rng.integers(n)]
        else:
            centroids[i] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((points - centroids[i]) ** 2, axis=1))
    return centroids


def _assign(points: np.ndarray, centroids: np.ndarray):
    d2 = (
        np.sum(points**2, axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + np.sum(centroids**2, axis=1)[None, :]
    )
    # exact distances for the winning assignment, immune to the expansion's
    # cancellation error
    labels = np.argmin(d2, axis=1)
    exact = np.sum((points - centroids[labels]) ** 2, axis=1)
    return labels, exact


def kmeans(points, k: int, seed: int, max_iter: int = 300, restarts: int = 4) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Deterministic for a fixed seed; the best inertia over `restarts`
    independent seedings is returned. A cluster emptied during iteration is
    re-seeded at the point farthest from its assigned centroid (one empty
    cluster at a time, re-measuring after each move).
    """
    pts = as_matrix(points, "points")
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must satisfy 1 <= k <= n, got k={k}, n={n}")
    best: KMeansResult | None = None
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        centroids = _kmeanspp_init(pts, k, rng)
        labels = np.full(n, -1)
        for _ in range(max_iter):
            new_labels, d2 = _assign(pts, centroids)
            for c in range(k):
                mask = new_labels == c
                if mask.any():
                    centroids[c] = pts[mask].mean(axis=0)
                else:
                    far = int(np.argmax(d2))
                    centroids[c] = pts[far]
                    new_labels[far] = c
                    d2[far] = 0.0
            if np.array_equal(new_labels, labels):
                break
            labels = new_labels
        labels, d2 = _assign(pts, centroids)
        result = KMeansResult(centroids=centroids, labels=labels, inertia=float(d2.sum()))
        if best is None or result.inertia < best.inertia:
            best = result
    assert best is not None
    return best


def frobenius_norm_sq(m) -> float:
    """Sum of squared entries."""
    a = as_matrix(m)
    return float(np.sum(a * a))


def save_matrix_csv(m, path) -> None:
    """One row per line, full '%.17g' precision (round-trips float64)."""
    np.savetxt(path, as_matrix(m), fmt="%.17g", delimiter=",")


def load_matrix_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))
