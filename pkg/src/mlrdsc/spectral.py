"""Affinity construction, normalized spectral clustering and clustering error."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans

from .selfexpress import SelfExpressionParams, mask_diagonal

DEGREE_EPS = 1e-10
KMEANS_RESTARTS = 20


@dataclass
class ClusteringResult:
    labels: np.ndarray
    Q: np.ndarray
    seed: int
    degenerate: bool = False


def _np(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def keep_top_per_column(M: np.ndarray, q: int) -> np.ndarray:
    """Zero all but the ``q`` largest-magnitude entries of each column."""
    if q >= M.shape[0]:
        return M.copy()
    order = np.argsort(-np.abs(M), axis=0, kind="stable")
    out = np.zeros_like(M)
    rows = order[:q]
    cols = np.broadcast_to(np.arange(M.shape[1]), rows.shape)
    out[rows, cols] = M[rows, cols]
    return out


def build_affinity(params: SelfExpressionParams, keep_top: int | None = None) -> np.ndarray:
    """``W = (|M| + |M^T|) / 2`` with ``M = C + mean_l D^l``.

    ``keep_top`` optionally sparsifies M to its largest entries per column
    before symmetrization; off by default.
    """
    params = mask_diagonal(params)
    M = _np(params.C) + sum(_np(d) for d in params.D) / params.L
    if keep_top is not None:
        M = keep_top_per_column(M, keep_top)
    A = np.abs(M)
    return (A + A.T) / 2.0


def labels_to_membership(labels, K: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    Q = np.zeros((labels.size, K))
    Q[np.arange(labels.size), labels] = 1.0
    return Q


def spectral_embedding(W: np.ndarray, K: int) -> np.ndarray:
    """Row-normalized top-K eigenvectors of the degree-normalized affinity."""
    W = np.asarray(W, dtype=np.float64)
    n = W.shape[0]
    dinv = 1.0 / np.sqrt(W.sum(axis=1) + DEGREE_EPS)
    A = dinv[:, None] * W * dinv[None, :]
    A = (A + A.T) / 2.0
    vals, vecs = scipy.linalg.eigh(A, subset_by_index=[n - K, n - 1])
    vecs = vecs[:, ::-1]
    # sign convention: largest-magnitude component of each eigenvector positive
    idx = np.argmax(np.abs(vecs), axis=0)
    vecs = vecs * np.sign(vecs[idx, np.arange(K)])[None, :]
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    return vecs / np.maximum(norms, DEGREE_EPS)


def spectral_cluster(W, K: int, seed: int = 0) -> ClusteringResult:
    W = np.asarray(W, dtype=np.float64)
    if K < 2:
        raise ValueError("K must be at least 2")
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError("affinity must be square")
    if W.shape[0] < K:
        raise ValueError(f"cannot form {K} clusters from {W.shape[0]} samples")
    degenerate = not np.any(W > 0)
    emb = spectral_embedding(W, K)
    km = KMeans(n_clusters=K, n_init=KMEANS_RESTARTS, random_state=seed).fit(emb)
    labels = km.labels_.astype(np.int64)
    return ClusteringResult(labels=labels, Q=labels_to_membership(labels, K), seed=seed, degenerate=degenerate)


def clustering_error(true_labels, pred_labels) -> float:
    """Percentage of misclustered samples under the best cluster-to-class matching."""
    t = np.asarray(true_labels)
    p = np.asarray(pred_labels)
    if t.shape != p.shape:
        raise ValueError(f"label vectors differ in length ({t.size} vs {p.size})")
    if t.size == 0:
        return 0.0
    _, ti = np.unique(t, return_inverse=True)
    _, pi = np.unique(p, return_inverse=True)
    confusion = np.zeros((ti.max() + 1, pi.max() + 1), dtype=np.int64)
    np.add.at(confusion, (ti, pi), 1)
    rows, cols = linear_sum_assignment(confusion, maximize=True)
    matched = confusion[rows, cols].sum()
    return float(100.0 * (1.0 - matched / t.size))
