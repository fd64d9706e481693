"""Classical self-expression solvers.

Both solvers minimise ``1/2 ||X - X C||_F^2 + lambda * g(C)`` where
``g(C) = 1/2 ||C||_F^2`` for the ``frobenius`` regularizer and ``||C||_1`` for
``l1``. With the 1/2 on the Frobenius term the unconstrained minimiser is
``(X^T X + lambda I)^{-1} X^T X``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClassicConfig:
    regularizer: str = "l1"
    lam: float = 0.01
    diag_constraint: bool = True
    max_iter: int = 5000
    tol: float = 1e-10

    def __post_init__(self):
        if self.regularizer not in ("frobenius", "l1"):
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.tol <= 0 or self.max_iter < 1:
            raise ValueError("need tol > 0 and max_iter >= 1")


def solve_frobenius_closed_form(X, lam: float) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    G = X.T @ X
    return np.linalg.solve(G + lam * np.eye(G.shape[0]), G)


def objective(X, C, cfg: ClassicConfig) -> float:
    X = np.asarray(X, dtype=np.float64)
    fit = 0.5 * np.sum((X - X @ C) ** 2)
    if cfg.regularizer == "frobenius":
        return fit + cfg.lam * 0.5 * np.sum(C ** 2)
    return fit + cfg.lam * np.sum(np.abs(C))


def _prox(V: np.ndarray, step: float, cfg: ClassicConfig) -> np.ndarray:
    if cfg.regularizer == "frobenius":
        out = V / (1.0 + step * cfg.lam)
    else:
        out = np.sign(V) * np.maximum(np.abs(V) - step * cfg.lam, 0.0)
    if cfg.diag_constraint:
        np.fill_diagonal(out, 0.0)
    return out


def _run(G: np.ndarray, X: np.ndarray, cfg: ClassicConfig, step: float, history: list | None):
    n = G.shape[0]
    C = np.zeros((n, n))
    obj = objective(X, C, cfg)
    if history is not None:
        history.append(obj)
    for _ in range(cfg.max_iter):
        C_new = _prox(C - step * (G @ C - G), step, cfg)
        obj_new = objective(X, C_new, cfg)
        if not np.isfinite(obj_new):
            return None
        if history is not None:
            history.append(obj_new)
        decrease = obj - obj_new
        C, obj = C_new, obj_new
        if decrease <= cfg.tol * max(abs(obj), 1e-300):
            break
    return C


def solve_iterative(X, cfg: ClassicConfig, history: list | None = None) -> np.ndarray:
    """Proximal gradient descent with step ``1 / ||X^T X||_2``.

    If the objective becomes non-finite the step is halved and the solve is
    restarted once before raising :class:`DivergenceError`. Pass a list as
    ``history`` to collect the objective after every iteration.
    """
    X = np.asarray(X, dtype=np.float64)
    G = X.T @ X
    step = 1.0 / max(np.linalg.norm(G, 2), 1e-12)
    for attempt in range(2):
        if history is not None:
            history.clear()
        C = _run(G, X, cfg, step, history)
        if C is not None:
            return C
        log.warning("proximal solver diverged (attempt %d); halving step", attempt + 1)
        step /= 2.0
    raise DivergenceError("objective became non-finite after step-size retry")


def subspace_preserving_rate(C, labels) -> float:
    """Fraction of total coefficient mass placed on same-label samples."""
    A = np.abs(np.asarray(C))
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    total = A.sum()
    return float(A[same].sum() / total) if total > 0 else 0.0
