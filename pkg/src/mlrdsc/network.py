"""Multi-level convolutional autoencoder with self-expressive connection layers.

Encoder level ``l`` is a stride-2 convolution with TensorFlow-style "same"
padding followed by ReLU, so spatial sizes are ceil-halved. Decoder level ``l``
is a stride-2 transposed convolution cropped (or zero-padded) to the exact
input size of encoder level ``l``; every decoder layer except the last applies
ReLU. Connection layer outputs ``Z^l (C + D^l)`` are added to the decoder
stream at the mirrored position.

Per-sample features are flattened channel-major, i.e. ``(channels, h, w)``
row-major, the native torch layout.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import container
from .selfexpress import (LossBreakdown, LossWeights, SelfExpressionParams, apply_self_expression,
                          offdiag_mask, total_loss)

SE_INIT = 1e-4
_CKPT_KIND = "model"


@dataclass(frozen=True)
class ArchitectureSpec:
    layers: tuple[tuple[int, int], ...]
    input_shape: tuple[int, int, int]
    connections: str = "all"
    learn_distinctive: bool = True

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple((int(f), int(k)) for f, k in self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if not self.layers:
            raise ValueError("need at least one encoder layer")
        for f, k in self.layers:
            if f < 1 or k < 1 or k % 2 == 0:
                raise ValueError(f"invalid layer (filters={f}, kernel={k}); kernels must be odd")
        if self.connections not in ("all", "bottleneck"):
            raise ValueError("connections must be 'all' or 'bottleneck'")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError("input_shape must be (height, width, channels)")

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def n_connections(self) -> int:
        return self.depth if self.connections == "all" else 1

    def level_shapes(self) -> list[tuple[int, int, int]]:
        """(channels, height, width) of every encoder output."""
        h, w, _ = self.input_shape
        out = []
        for f, _ in self.layers:
            h, w = math.ceil(h / 2), math.ceil(w / 2)
            out.append((f, h, w))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [list(x) for x in self.layers]
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(layers=tuple(tuple(x) for x in d["layers"]), input_shape=tuple(d["input_shape"]),
                   connections=d.get("connections", "all"),
                   learn_distinctive=d.get("learn_distinctive", True))


@dataclass
class LevelFeatures:
    Z: list[torch.Tensor]

    @property
    def flat(self) -> list[torch.Tensor]:
        return [flatten(z) for z in self.Z]


def flatten(z: torch.Tensor) -> torch.Tensor:
    """(n, c, h, w) -> (c*h*w, n)."""
    return z.reshape(z.shape[0], -1).T


def unflatten(m: torch.Tensor, shape: tuple[int, int, int]) -> torch.Tensor:
    """(c*h*w, n) -> (n, c, h, w)."""
    return m.T.reshape(m.shape[1], *shape)


def _same_pad(x: torch.Tensor, k: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    ph = max((math.ceil(h / 2) - 1) * 2 + k - h, 0)
    pw = max((math.ceil(w / 2) - 1) * 2 + k - w, 0)
    return F.pad(x, [pw // 2, pw - pw // 2, ph // 2, ph - ph // 2])


def _fit(x: torch.Tensor, h: int, w: int) -> torch.Tensor:
    # negative padding crops
    eh, ew = x.shape[-2] - h, x.shape[-1] - w
    return F.pad(x, [-(ew // 2), -(ew - ew // 2), -(eh // 2), -(eh - eh // 2)])


class SelfExpressionLayers(nn.Module):
    def __init__(self, n: int, levels: int, learn_distinctive: bool = True):
        super().__init__()
        mask = offdiag_mask(n)
        self.register_buffer("mask", mask)
        self.C = nn.Parameter(SE_INIT * mask.clone())
        if learn_distinctive:
            self.D = nn.ParameterList([nn.Parameter(SE_INIT * mask.clone()) for _ in range(levels)])
        else:
            for l in range(levels):
                self.register_buffer(f"D_frozen_{l}", torch.zeros(n, n))
            self.D = None
        self.levels = levels

    def distinctive(self) -> list[torch.Tensor]:
        if self.D is not None:
            return list(self.D)
        return [getattr(self, f"D_frozen_{l}") for l in range(self.levels)]

    def params(self) -> SelfExpressionParams:
        return SelfExpressionParams(self.C * self.mask, [d * self.mask for d in self.distinctive()])

    @torch.no_grad()
    def project(self) -> None:
        """Zero the diagonals in place (the projection step after each update)."""
        self.C.mul_(self.mask)
        for d in self.distinctive():
            d.mul_(self.mask)


class MultiLevelAE(nn.Module):
    """Encoder/decoder weights plus self-expression coefficients for one dataset of ``n`` samples."""

    def __init__(self, spec: ArchitectureSpec, n: int):
        super().__init__()
        if n < 2:
            raise ValueError("need at least two samples")
        self.spec = spec
        self.n = n
        chans = [spec.input_shape[2]] + [f for f, _ in spec.layers]
        self.encoder = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], k, stride=2) for i, (_, k) in enumerate(spec.layers))
        self.decoder = nn.ModuleList(
            nn.ConvTranspose2d(chans[i + 1], chans[i], k, stride=2) for i, (_, k) in enumerate(spec.layers))
        self.selfexpr = SelfExpressionLayers(n, spec.n_connections, spec.learn_distinctive)
        h, w, _ = spec.input_shape
        self._targets = [(h, w)] + [(s[1], s[2]) for s in spec.level_shapes()[:-1]]

    # data layout helpers -------------------------------------------------

    def to_images(self, X) -> torch.Tensor:
        """(d, n) matrix in (h, w, c) row-major order -> (n, c, h, w) tensor."""
        X = torch.as_tensor(X, dtype=self.selfexpr.C.dtype)
        if X.ndim == 4:
            return X
        h, w, c = self.spec.input_shape
        if X.shape[0] != h * w * c:
            raise ValueError(f"X has {X.shape[0]} rows, architecture expects {h * w * c}")
        return X.T.reshape(X.shape[1], h, w, c).permute(0, 3, 1, 2)

    @staticmethod
    def to_matrix(images: torch.Tensor) -> torch.Tensor:
        return images.permute(0, 2, 3, 1).reshape(images.shape[0], -1).T

    # forward paths ---------------------------------------------------------

    def encode(self, x: torch.Tensor) -> LevelFeatures:
        x = self.to_images(x)
        c, h, w = self.spec.input_shape[2], *self.spec.input_shape[:2]
        if tuple(x.shape[1:]) != (c, h, w):
            raise ValueError(f"input shape {tuple(x.shape[1:])} does not match architecture {(c, h, w)}")
        feats = []
        for conv, (_, k) in zip(self.encoder, self.spec.layers):
            x = F.relu(conv(_same_pad(x, k)))
            feats.append(x)
        return LevelFeatures(feats)

    def _connected(self, feats: LevelFeatures) -> list[torch.Tensor]:
        return feats.Z if self.spec.connections == "all" else feats.Z[-1:]

    def decode(self, modified: list[torch.Tensor]) -> torch.Tensor:
        shapes = self.spec.level_shapes()
        if len(modified) != self.spec.n_connections:
            raise ValueError(f"expected {self.spec.n_connections} modified levels, got {len(modified)}")
        skip_levels = list(range(1, self.spec.depth + 1)) if self.spec.connections == "all" else [self.spec.depth]
        for lvl, m in zip(skip_levels, modified):
            if tuple(m.shape[1:]) != shapes[lvl - 1]:
                raise ValueError(f"level {lvl}: modified features have shape {tuple(m.shape[1:])}, "
                                 f"expected {shapes[lvl - 1]}")
        by_level = dict(zip(skip_levels, modified))
        h = by_level[self.spec.depth]
        for lvl in range(self.spec.depth, 0, -1):
            h = _fit(self.decoder[lvl - 1](h), *self._targets[lvl - 1])
            if lvl > 1:
                h = F.relu(h)
                if lvl - 1 in by_level:
                    h = h + by_level[lvl - 1]
        return h

    def forward_pretrain(self, x) -> torch.Tensor:
        return self.decode(self._connected(self.encode(x)))

    def forward_full(self, x, Q, w: LossWeights, regularizer: str = "membership",
                     aggregation: str = "literal") -> tuple[torch.Tensor, LevelFeatures, LossBreakdown]:
        images = self.to_images(x)
        feats = self.encode(images)
        params = self.selfexpr.params()
        levels = self._connected(feats)
        flat = [flatten(z) for z in levels]
        modified = [unflatten(apply_self_expression(z, params, l), tuple(lv.shape[1:]))
                    for l, (z, lv) in enumerate(zip(flat, levels), start=1)]
        x_hat = self.decode(modified)
        Q = torch.as_tensor(Q, dtype=params.C.dtype)
        breakdown = total_loss(self.to_matrix(images), self.to_matrix(x_hat), flat, params, Q, w,
                               regularizer, aggregation)
        return x_hat, feats, breakdown


def init_params(spec: ArchitectureSpec, n: int, seed: int = 0, dtype=torch.float64) -> MultiLevelAE:
    """Build a model with uniform fan-in-scaled conv weights and 1e-4 off-diagonal coefficients.

    Conv weights and biases are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
    with fan_in computed the way torch does (``weight.shape[1] * k * k``).
    """
    model = MultiLevelAE(spec, n).to(dtype)
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for layer in list(model.encoder) + list(model.decoder):
            k = layer.kernel_size[0]
            bound = 1.0 / math.sqrt(layer.weight.shape[1] * k * k)
            layer.weight.copy_(torch.empty(layer.weight.shape, dtype=torch.float64).uniform_(-bound, bound, generator=g))
            layer.bias.copy_(torch.empty(layer.bias.shape, dtype=torch.float64).uniform_(-bound, bound, generator=g))
    return model


def model_arrays(model: MultiLevelAE) -> dict[str, np.ndarray]:
    return {f"model.{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def model_from_arrays(spec: ArchitectureSpec, n: int, arrays: dict[str, np.ndarray]) -> MultiLevelAE:
    state = {k[len("model."):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("model.")}
    dtype = state["selfexpr.C"].dtype
    model = MultiLevelAE(spec, n).to(dtype)
    model.load_state_dict(state)
    return model


def save_model(model: MultiLevelAE, path, seed: int | None = None) -> None:
    meta = {"arch": model.spec.to_dict(), "n": model.n, "seed": seed}
    container.write(path, _CKPT_KIND, model_arrays(model), meta)


def load_model(path) -> tuple[MultiLevelAE, dict]:
    arrays, meta = container.read(path, _CKPT_KIND)
    return model_from_arrays(ArchitectureSpec.from_dict(meta["arch"]), meta["n"], arrays), meta
