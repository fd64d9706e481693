"""Pretraining and the alternating train / re-cluster loop.

Every epoch is one full-batch Adam step on the complete objective, followed by
projecting the coefficient diagonals back to zero. Every ``T`` epochs the
affinity is rebuilt and spectral clustering replaces the membership matrix.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import container
from .network import ArchitectureSpec, MultiLevelAE, model_arrays, model_from_arrays
from .selfexpress import LossBreakdown, LossWeights
from .spectral import ClusteringResult, build_affinity, clustering_error, labels_to_membership, spectral_cluster

log = logging.getLogger(__name__)

_STATE_KIND = "train_state"
LOSS_FIELDS = ("recon", "exp", "lc", "ld", "total")


class TrainingError(RuntimeError):
    """Raised when the loss becomes non-finite."""

    def __init__(self, message: str, model: MultiLevelAE | None = None):
        super().__init__(message)
        self.model = model


@dataclass
class TrainConfig:
    weights: LossWeights
    T: int
    max_iter: int
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    pretrain_epochs: int = 2000
    pretrain_plateau_tol: float = 1e-5
    pretrain_plateau_window: int = 100
    stabilize: bool = False
    regularizer: str = "membership"
    aggregation: str = "literal"
    keep_top: int | None = None

    def __post_init__(self):
        if self.T < 1 or self.max_iter < 1:
            raise ValueError("T and max_iter must be at least 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.pretrain_epochs < 0:
            raise ValueError("pretrain_epochs must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


@dataclass
class TrainState:
    epoch: int
    model: MultiLevelAE
    optimizer: torch.optim.Adam
    Q: np.ndarray
    X: torch.Tensor
    K: int
    cfg: TrainConfig
    loss_history: list[LossBreakdown] = field(default_factory=list)
    q_update_history: list[tuple[int, np.ndarray]] = field(default_factory=list)
    finished: bool = False
    result: ClusteringResult | None = None


# ---------------------------------------------------------------------------
# pretraining


def pretrain(X, model: MultiLevelAE, cfg: TrainConfig, on_epoch: Callable | None = None) -> MultiLevelAE:
    """Fit encoder and decoder on reconstruction alone, with every connection shortcut.

    Runs up to ``cfg.pretrain_epochs`` full-batch Adam steps and stops early when
    the loss improved by less than ``pretrain_plateau_tol`` (relative) over the
    last ``pretrain_plateau_window`` epochs. The self-expression coefficients are
    not touched.
    """
    if cfg.pretrain_epochs == 0:
        return model
    images = model.to_images(X)
    ae_params = list(model.encoder.parameters()) + list(model.decoder.parameters())
    opt = torch.optim.Adam(ae_params, lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)
    losses: list[float] = []
    last_good = copy.deepcopy(model.state_dict())
    for epoch in range(1, cfg.pretrain_epochs + 1):
        opt.zero_grad()
        loss = ((images - model.forward_pretrain(images)) ** 2).sum()
        value = float(loss.detach())
        if not math.isfinite(value):
            model.load_state_dict(last_good)
            raise TrainingError(f"pretraining loss became non-finite at epoch {epoch}", model)
        last_good = copy.deepcopy(model.state_dict())
        loss.backward()
        opt.step()
        losses.append(value)
        if on_epoch is not None:
            on_epoch(epoch, value)
        w = cfg.pretrain_plateau_window
        if len(losses) > w and (losses[-w - 1] - losses[-1]) <= cfg.pretrain_plateau_tol * abs(losses[-w - 1]):
            log.info("pretraining plateaued at epoch %d (loss %.6g)", epoch, value)
            break
    return model


# ---------------------------------------------------------------------------
# alternating training


def _make_optimizer(model: MultiLevelAE, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=cfg.lr,
                            betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)


def _affinity(model: MultiLevelAE, cfg: TrainConfig) -> np.ndarray:
    with torch.no_grad():
        return build_affinity(model.selfexpr.params(), keep_top=cfg.keep_top)


def init_state(X, K: int, cfg: TrainConfig, model: MultiLevelAE) -> TrainState:
    images = model.to_images(X).detach()
    if images.shape[0] != model.n:
        raise ValueError(f"model built for {model.n} samples, got {images.shape[0]}")
    return TrainState(epoch=0, model=model, optimizer=_make_optimizer(model, cfg),
                      Q=np.zeros((model.n, K)), X=images, K=K, cfg=cfg)


def _stable(state: TrainState) -> bool:
    h = state.q_update_history
    return len(h) >= 2 and h[-1][0] == state.epoch and clustering_error(h[-1][1], h[-2][1]) == 0.0


def _done(state: TrainState) -> bool:
    cfg = state.cfg
    if state.epoch < cfg.max_iter:
        return False
    if not cfg.stabilize or state.epoch >= 3 * cfg.max_iter:
        return True
    return _stable(state)


def step(state: TrainState) -> tuple[LossBreakdown, bool]:
    """Run one epoch; returns its loss breakdown and whether Q was refreshed."""
    cfg, model = state.cfg, state.model
    k = state.epoch + 1
    state.optimizer.zero_grad()
    _, _, b = model.forward_full(state.X, state.Q, cfg.weights, cfg.regularizer, cfg.aggregation)
    if not math.isfinite(b.total):
        raise TrainingError(f"epoch {k}: non-finite loss (recon={b.recon:.4g}, exp={b.exp:.4g}, "
                            f"lc={b.lc:.4g}, ld={b.ld:.4g})", model)
    b.graph.backward()
    state.optimizer.step()
    model.selfexpr.project()
    b.graph = None
    state.loss_history.append(b)
    state.epoch = k

    q_updated = False
    if k % cfg.T == 0:
        try:
            res = spectral_cluster(_affinity(model, cfg), state.K, cfg.seed)
        except (ValueError, np.linalg.LinAlgError) as exc:
            log.warning("epoch %d: spectral clustering failed (%s); keeping previous Q", k, exc)
        else:
            state.Q = labels_to_membership(res.labels, state.K)
            state.q_update_history.append((k, res.labels.copy()))
            state.result = res
            q_updated = True
    return b, q_updated


def run(state: TrainState, on_epoch: Callable | None = None, loss_csv=None,
        checkpoint_path=None, checkpoint_every: int | None = None,
        stop_at: int | None = None) -> tuple[ClusteringResult | None, TrainState]:
    """Advance ``state`` until training finishes (or until epoch ``stop_at``).

    ``on_epoch(state, breakdown, q_updated)`` is called after every epoch.
    ``loss_csv`` appends one row per epoch. If ``checkpoint_path`` is given the
    state is saved every ``checkpoint_every`` epochs and at the end.
    """
    writer = fh = None
    if loss_csv is not None:
        new = not Path(loss_csv).exists()
        fh = open(loss_csv, "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(["epoch", *LOSS_FIELDS, "q_updated"])
    try:
        while not state.finished and not _done(state):
            if stop_at is not None and state.epoch >= stop_at:
                break
            b, q_updated = step(state)
            if writer is not None:
                writer.writerow([state.epoch, *(repr(getattr(b, f)) for f in LOSS_FIELDS), int(q_updated)])
            if on_epoch is not None:
                on_epoch(state, b, q_updated)
            if checkpoint_path is not None and checkpoint_every and state.epoch % checkpoint_every == 0:
                save_state(state, checkpoint_path)
        if not state.finished and _done(state):
            _finish(state)
    finally:
        if fh is not None:
            fh.close()
    if checkpoint_path is not None:
        save_state(state, checkpoint_path)
    return state.result if state.finished else None, state


def _finish(state: TrainState) -> None:
    h = state.q_update_history
    if not (h and h[-1][0] == state.epoch and state.result is not None):
        state.result = spectral_cluster(_affinity(state.model, state.cfg), state.K, state.cfg.seed)
    state.finished = True


def train(X, K: int, cfg: TrainConfig, model: MultiLevelAE, **run_kwargs) -> tuple[ClusteringResult, TrainState]:
    """Train from ``model`` (pretrained or fresh) with Q starting at zero; see :func:`run`."""
    return run(init_state(X, K, cfg, model), **run_kwargs)


# ---------------------------------------------------------------------------
# checkpoints


def save_state(state: TrainState, path) -> None:
    arrays = model_arrays(state.model)
    opt = state.optimizer.state_dict()
    for idx, slot in opt["state"].items():
        for key, val in slot.items():
            arrays[f"optim.{idx}.{key}"] = torch.as_tensor(val).detach().cpu().numpy()
    arrays["Q"] = state.Q
    arrays["X"] = state.X.detach().cpu().numpy()
    arrays["loss_history"] = np.array([[getattr(b, f) for f in LOSS_FIELDS] for b in state.loss_history],
                                      dtype=np.float64).reshape(-1, len(LOSS_FIELDS))
    arrays["q_epochs"] = np.array([e for e, _ in state.q_update_history], dtype=np.int64)
    arrays["q_labels"] = np.array([lab for _, lab in state.q_update_history], dtype=np.int64).reshape(
        len(state.q_update_history), state.model.n)
    if state.result is not None:
        arrays["result_labels"] = state.result.labels.astype(np.int64)
    meta = {
        "arch": state.model.spec.to_dict(),
        "n": state.model.n,
        "K": state.K,
        "epoch": state.epoch,
        "finished": state.finished,
        "cfg": state.cfg.to_dict(),
        "param_groups": opt["param_groups"],
        "result_degenerate": bool(state.result.degenerate) if state.result is not None else None,
    }
    container.write(path, _STATE_KIND, arrays, meta)


def load_state(path) -> TrainState:
    arrays, meta = container.read(path, _STATE_KIND)
    cfg = TrainConfig.from_dict(meta["cfg"])
    model = model_from_arrays(ArchitectureSpec.from_dict(meta["arch"]), meta["n"], arrays)
    optimizer = _make_optimizer(model, cfg)
    opt_state: dict = {}
    for name, val in arrays.items():
        if name.startswith("optim."):
            _, idx, key = name.split(".", 2)
            opt_state.setdefault(int(idx), {})[key] = torch.from_numpy(val)
    groups = meta["param_groups"]
    for g in groups:
        g["betas"] = tuple(g["betas"])
    optimizer.load_state_dict({"state": opt_state, "param_groups": groups})
    history = [LossBreakdown(*row) for row in arrays["loss_history"].tolist()]
    q_hist = [(int(e), lab.copy()) for e, lab in zip(arrays["q_epochs"], arrays["q_labels"])]
    result = None
    if "result_labels" in arrays:
        labels = arrays["result_labels"]
        result = ClusteringResult(labels=labels, Q=labels_to_membership(labels, meta["K"]), seed=cfg.seed,
                                  degenerate=bool(meta["result_degenerate"]))
    return TrainState(epoch=meta["epoch"], model=model, optimizer=optimizer, Q=arrays["Q"],
                      X=torch.from_numpy(arrays["X"]), K=meta["K"], cfg=cfg, loss_history=history,
                      q_update_history=q_hist, finished=meta["finished"], result=result)


def resume(checkpoint_path, **run_kwargs) -> TrainState:
    """Load a checkpoint and continue training to completion; finished runs are returned as-is.

    Progress keeps being saved to ``checkpoint_path`` unless ``run_kwargs`` names another one.
    """
    state = load_state(checkpoint_path)
    if state.finished:
        return state
    run_kwargs.setdefault("checkpoint_path", checkpoint_path)
    _, state = run(state, **run_kwargs)
    return state
