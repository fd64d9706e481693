"""Self-expression coefficients and the terms of the multi-level training objective.

Feature matrices follow the column convention: ``Z`` is (d_l, n), one column per
sample, and the self-expressed features are ``Z @ (C + D_l)``, so entry
``(j, i)`` of a coefficient matrix weighs sample ``j`` when rebuilding sample ``i``.

All functions accept torch tensors (autograd flows through them) or numpy
arrays, and return 0-d tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch

C_REGULARIZERS = ("membership", "l1", "l2")


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x)


def offdiag_mask(n: int, dtype=torch.float64, device=None) -> torch.Tensor:
    return 1.0 - torch.eye(n, dtype=dtype, device=device)


@dataclass
class SelfExpressionParams:
    C: torch.Tensor
    D: list[torch.Tensor]

    def __post_init__(self):
        self.C = _t(self.C)
        self.D = [_t(d) for d in self.D]
        n = self.C.shape[0]
        if self.C.shape != (n, n):
            raise ValueError(f"C must be square, got {tuple(self.C.shape)}")
        for l, d in enumerate(self.D, start=1):
            if d.shape != (n, n):
                raise ValueError(f"D^{l} has shape {tuple(d.shape)}, expected {(n, n)}")
        if not self.D:
            raise ValueError("need at least one distinctive matrix")

    @property
    def L(self) -> int:
        return len(self.D)

    @property
    def n(self) -> int:
        return self.C.shape[0]

    def coefficient(self, level: int) -> torch.Tensor:
        """Masked ``C + D^level`` for a 1-based level."""
        if not 1 <= level <= self.L:
            raise ValueError(f"level {level} outside 1..{self.L}")
        mask = offdiag_mask(self.n, self.C.dtype, self.C.device)
        return self.C * mask + self.D[level - 1] * mask

    def detach(self) -> "SelfExpressionParams":
        return SelfExpressionParams(self.C.detach().clone(), [d.detach().clone() for d in self.D])


@dataclass(frozen=True)
class LossWeights:
    lambda1: float
    lambda2: float
    lambda3: float

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) <= 0:
            raise ValueError("loss weights must be strictly positive")

    def scaled(self, s1: float = 1.0, s2: float = 1.0, s3: float = 1.0) -> "LossWeights":
        return LossWeights(self.lambda1 * s1, self.lambda2 * s2, self.lambda3 * s3)


@dataclass
class LossBreakdown:
    recon: float
    exp: float
    lc: float
    ld: float
    total: float
    # differentiable total, kept out of comparisons and serialisation
    graph: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def as_row(self) -> dict[str, float]:
        return {"recon": self.recon, "exp": self.exp, "lc": self.lc, "ld": self.ld, "total": self.total}


def mask_diagonal(params: SelfExpressionParams) -> SelfExpressionParams:
    mask = offdiag_mask(params.n, params.C.dtype, params.C.device)
    return SelfExpressionParams(params.C * mask, [d * mask for d in params.D])


def apply_self_expression(Z, params: SelfExpressionParams, level: int) -> torch.Tensor:
    Z = _t(Z)
    if Z.ndim != 2 or Z.shape[1] != params.n:
        raise ValueError(f"level {level}: features have shape {tuple(Z.shape)}, expected (d, {params.n})")
    return Z @ params.coefficient(level)


def loss_exp(Z_levels: Sequence, params: SelfExpressionParams) -> torch.Tensor:
    if len(Z_levels) != params.L:
        raise ValueError(f"got {len(Z_levels)} feature levels for {params.L} coefficient levels")
    total = None
    for l, Z in enumerate(Z_levels, start=1):
        Z = _t(Z)
        r = ((Z - apply_self_expression(Z, params, l)) ** 2).sum()
        total = r if total is None else total + r
    return total


def loss_c(Q, C, aggregation: str = "literal") -> torch.Tensor:
    """Membership-weighted sparsity term on the consistency matrix.

    ``literal`` sums every entry of ``Q^T |C|``. ``column_l2`` takes, for each
    sample column, the l2 norm over clusters and sums those norms.
    """
    Q, C = _t(Q), _t(C)
    if Q.ndim != 2 or Q.shape[0] != C.shape[0]:
        raise ValueError(f"Q has shape {tuple(Q.shape)}, expected ({C.shape[0]}, K)")
    M = Q.to(C.dtype).T @ C.abs()
    if aggregation == "literal":
        return M.sum()
    if aggregation == "column_l2":
        # vector_norm uses a zero subgradient for all-zero columns
        return torch.linalg.vector_norm(M, dim=0).sum()
    raise ValueError(f"unknown aggregation {aggregation!r}")


def loss_d(params: SelfExpressionParams) -> torch.Tensor:
    total = None
    for D in params.D:
        r = (D ** 2).sum()
        total = r if total is None else total + r
    return total


def c_penalty(C, Q, regularizer: str = "membership", aggregation: str = "literal") -> torch.Tensor:
    """Regularizer on C selected by the training variant.

    ``membership`` is the pseudo-label term (zero while Q is all-zero), ``l1``
    is ``||C||_1`` and ``l2`` is ``||C||_F^2``.
    """
    C = _t(C)
    if regularizer == "membership":
        return loss_c(Q, C, aggregation)
    if regularizer == "l1":
        return C.abs().sum()
    if regularizer == "l2":
        return (C ** 2).sum()
    raise ValueError(f"unknown C regularizer {regularizer!r}; choose from {C_REGULARIZERS}")


def total_loss(X, X_hat, Z_levels, params: SelfExpressionParams, Q, w: LossWeights,
               regularizer: str = "membership", aggregation: str = "literal") -> LossBreakdown:
    X, X_hat = _t(X), _t(X_hat)
    if X.shape != X_hat.shape:
        raise ValueError(f"reconstruction shape {tuple(X_hat.shape)} differs from input {tuple(X.shape)}")
    params = mask_diagonal(params)
    recon = ((X - X_hat) ** 2).sum()
    exp = loss_exp(Z_levels, params)
    lc = c_penalty(params.C, Q, regularizer, aggregation)
    ld = loss_d(params)
    graph = recon + w.lambda1 * exp + w.lambda2 * lc + w.lambda3 * ld
    r, e, c, d = (float(v.detach()) for v in (recon, exp, lc, ld))
    return LossBreakdown(recon=r, exp=e, lc=c, ld=d,
                         total=r + w.lambda1 * e + w.lambda2 * c + w.lambda3 * d, graph=graph)
