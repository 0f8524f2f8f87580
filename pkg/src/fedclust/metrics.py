"""Clustering quality scores and dimensional-collapse diagnostics.

nmi uses the sqrt-of-entropy-product normalization; kappa aligns predicted
clusters to true classes by maximum-agreement assignment before computing
chance-corrected agreement. collapse_report summarizes the spectrum and
interdimensional correlations of a representation matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .numerics import correlation_matrix, covariance, svd

HIST_BINS = 40


def _check_labels(a, b):
    a = np.asarray(a, dtype=np.int64).ravel()
    b = np.asarray(b, dtype=np.int64).ravel()
    if len(a) != len(b):
        raise ValueError(f"label vectors differ in length: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise ValueError("label vectors are empty")
    if a.min() < 0 or b.min() < 0:
        raise ValueError("labels must be non-negative")
    return a, b


def contingency_table(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    table = np.zeros((int(a.max()) + 1, int(b.max()) + 1), dtype=np.int64)
    np.add.at(table, (a, b), 1)
    return table


def nmi(a, b) -> float:
    """Normalized mutual information I(a;b) / sqrt(H(a) H(b)) in [0, 1].

    Convention for degenerate partitions: 1.0 when both sides are a single
    cluster (they agree trivially), 0.0 when exactly one side is.
    """
    a, b = _check_labels(a, b)
    n = len(a)
    w = contingency_table(a, b).astype(np.float64)
    pa = w.sum(axis=1) / n
    pb = w.sum(axis=0) / n
    ha = -np.sum(pa[pa > 0] * np.log(pa[pa > 0]))
    hb = -np.sum(pb[pb > 0] * np.log(pb[pb > 0]))
    if ha == 0.0 and hb == 0.0:
        return 1.0
    if ha == 0.0 or hb == 0.0:
        return 0.0
    pj = w / n
    mask = pj > 0
    outer = pa[:, None] * pb[None, :]
    mi = float(np.sum(pj[mask] * np.log(pj[mask] / outer[mask])))
    return mi / np.sqrt(ha * hb)


def _optimal_alignment(w: np.ndarray) -> np.ndarray:
    """Agreement-maximizing permutation; ties broken by minimal expected
    agreement (hence maximal kappa).

    The two objectives are folded into one integer assignment solve: any unit
    of agreement outweighs the whole chance-term range, so the solver first
    maximizes agreement and then minimizes sum of marginal products. The
    tie-break makes the resulting (p_o, p_e) pair, and therefore kappa, a
    function of the table content alone, invariant to relabeling.
    """
    pred_marg = w.sum(axis=1)
    truth_marg = w.sum(axis=0)
    chance = pred_marg[:, None] * truth_marg[None, :]  # n^2 * marginal products
    big = int(chance.sum()) + 1
    cost = -w.astype(np.int64) * big + chance.astype(np.int64)
    rows, cols = linear_sum_assignment(cost)
    return cols[np.argsort(rows)]


def kappa(pred, truth) -> float:
    """Chance-corrected agreement after optimal cluster-to-class alignment.

    Predicted clusters are matched one-to-one to true classes on the (zero-
    padded, square) contingency table by maximum total agreement; Cohen's
    kappa (p_o - p_e) / (1 - p_e) is then computed for the aligned labeling.
    Returns 0.0 when expected agreement p_e reaches 1 (degenerate case).
    """
    pred, truth = _check_labels(pred, truth)
    n = len(pred)
    d = int(max(pred.max(), truth.max())) + 1
    w = np.zeros((d, d), dtype=np.int64)
    np.add.at(w, (pred, truth), 1)
    assignment = _optimal_alignment(w)
    p_o = w[np.arange(d), assignment].sum() / n
    pred_marg = w.sum(axis=1) / n
    truth_marg = w.sum(axis=0) / n
    p_e = float(np.sum(pred_marg * truth_marg[assignment]))
    if p_e >= 1.0:
        return 0.0
    return float((p_o - p_e) / (1.0 - p_e))


@dataclass
class CollapseReport:
    singular_values: np.ndarray  # of the covariance of the representations, descending
    effective_rank: float  # exp of spectral entropy
    near_zero_count: int  # sigma < tau0 * sigma_max
    offdiag_corr_hist: np.ndarray  # 40 bins over [-1, 1], counts unordered pairs
    mean_abs_offdiag: float
    tau0: float

    def to_json(self) -> dict:
        return {
            "singular_values": self.singular_values.tolist(),
            "effective_rank": self.effective_rank,
            "near_zero_count": self.near_zero_count,
            "offdiag_corr_hist": self.offdiag_corr_hist.tolist(),
            "mean_abs_offdiag": self.mean_abs_offdiag,
            "tau0": self.tau0,
        }

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2)


def effective_rank(singular_values: np.ndarray) -> float:
    """exp(entropy) of the normalized spectrum; 0.0 for an all-zero spectrum."""
    total = singular_values.sum()
    if total <= 0.0:
        return 0.0
    p = singular_values / total
    p = p[p > 0]
    return float(np.exp(-np.sum(p * np.log(p))))


def collapse_report(Z, tau0: float = 1e-3) -> CollapseReport:
    """Spectrum and correlation summary of a (d', n) representation matrix.

    Uses the covariance over columns; the histogram covers the d'(d'-1)/2
    unordered off-diagonal correlation pairs (degenerate zero-variance
    dimensions contribute zeros).
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] < 2:
        raise ValueError("need a 2-D matrix with at least 2 samples")
    sigma = covariance(Z)
    s = svd(sigma).S
    s_max = s[0] if len(s) else 0.0
    near_zero = int(np.sum(s < tau0 * s_max)) if s_max > 0 else len(s)
    corr = correlation_matrix(sigma)
    iu = np.triu_indices(corr.shape[0], k=1)
    offdiag = np.clip(corr[iu], -1.0, 1.0)
    hist, _ = np.histogram(offdiag, bins=HIST_BINS, range=(-1.0, 1.0))
    return CollapseReport(
        singular_values=s,
        effective_rank=effective_rank(s),
        near_zero_count=near_zero,
        offdiag_corr_hist=hist,
        mean_abs_offdiag=float(np.mean(np.abs(offdiag))) if len(offdiag) else 0.0,
        tau0=tau0,
    )
