"""Backbone plus the parallel global and dense projection heads.

Tensors follow torch layout: images ``B x 3 x H x W`` with values in [0, 1],
feature maps ``B x K x h x w``.  Dense embeddings are returned flattened to
``B x S*S x E`` with cells in row-major order, which is the layout every loss
and matcher function consumes.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from densecl.errors import ConfigError, DegenerateInputError, ShapeError

NORM_EPS = 1e-12


@dataclass(frozen=True)
class HeadConfig:
    hidden_dim: int = 2048
    out_dim: int = 128
    grid_size: int = 7

    def __post_init__(self):
        for name in ("hidden_dim", "out_dim", "grid_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {getattr(self, name)}")


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple[int, ...] = (32, 64, 128, 256)
    norm: str = "batch"  # "batch" | "none"
    residual: bool = False
    head: HeadConfig = field(default_factory=lambda: HeadConfig(hidden_dim=256))

    def __post_init__(self):
        if not self.channels or min(self.channels) < 1:
            raise ConfigError(f"model.channels must be positive, got {self.channels}")
        if self.norm not in ("batch", "none"):
            raise ConfigError(f"model.norm must be one of batch|none, got {self.norm!r}")

    @property
    def stride(self) -> int:
        return 2 ** (len(self.channels) - 1)


def l2_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return x / (x.norm(dim=dim, keepdim=True) + NORM_EPS)


def _conv_block(cin, cout, stride, norm):
    layers = [nn.Conv2d(cin, cout, 3, stride, 1, bias=norm == "none")]
    if norm == "batch":
        layers.append(nn.BatchNorm2d(cout))
    layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class _Stage(nn.Module):
    def __init__(self, cin, cout, norm, residual):
        super().__init__()
        self.down = _conv_block(cin, cout, 2, norm)
        self.conv = _conv_block(cout, cout, 1, norm)
        self.residual = residual

    def forward(self, x):
        x = self.down(x)
        y = self.conv(x)
        return x + y if self.residual else y


class Backbone(nn.Module):
    """conv3x3 s1 stem, then one [conv3x3 s2, conv3x3 s1] stage per extra width."""

    def __init__(self, channels=(32, 64, 128, 256), norm="batch", residual=False):
        super().__init__()
        self.stem = _conv_block(3, channels[0], 1, norm)
        self.stages = nn.Sequential(*[
            _Stage(cin, cout, norm, residual) for cin, cout in zip(channels[:-1], channels[1:])
        ])
        self.out_channels = channels[-1]
        self.stride = 2 ** (len(channels) - 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h != w or h % self.stride:
            raise ShapeError(
                f"backbone expects square input with side divisible by {self.stride}, got {h}x{w}")
        return self.stages(self.stem((x - 0.5) / 0.25))


@functools.lru_cache(maxsize=32)
def _pool_matrix(h: int, w: int, S: int, dtype: torch.dtype) -> torch.Tensor:
    """``S*S x h*w`` averaging weights; row ``i*S + j`` covers row bin i, column bin j."""
    def bins(n):
        m = np.zeros((S, n))
        for i in range(S):
            lo, hi = (i * n) // S, -((-(i + 1) * n) // S)
            m[i, lo:hi] = 1.0 / (hi - lo)
        return m

    return torch.from_numpy(np.kron(bins(h), bins(w))).to(dtype)


def pool_cells(f: torch.Tensor, S: int) -> torch.Tensor:
    """Adaptive average pooling of ``... x K x h x w`` straight to ``... x S*S x K`` cells.

    Bin i spans [floor(i*h/S), ceil((i+1)*h/S)).  One matmul: faster on CPU than
    ``adaptive_avg_pool2d`` when S does not divide h.
    """
    h, w = f.shape[-2:]
    if not 1 <= S <= min(h, w):
        raise ShapeError(f"grid size S={S} must lie in [1, {min(h, w)}] for a {h}x{w} feature map")
    # pool on the right so the gradient reaching ``f`` stays contiguous
    return (f.flatten(-2) @ _pool_matrix(h, w, S, f.dtype).T).transpose(-1, -2)


def adaptive_avg_pool(f: torch.Tensor, S: int) -> torch.Tensor:
    """Pool ``... x K x h x w`` to ``... x K x S x S`` (bins as in :func:`pool_cells`)."""
    return pool_cells(f, S).transpose(-1, -2).unflatten(-1, (S, S))


def flatten_cells(x: torch.Tensor) -> torch.Tensor:
    """``B x C x S x S`` -> ``B x S*S x C``."""
    return x.flatten(-2).transpose(-1, -2)


class GlobalHead(nn.Module):
    """Global average pooling followed by a two-layer MLP."""

    def __init__(self, in_dim, hidden_dim, out_dim):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, out_dim)

    def mlp(self, x):
        return self.fc2(F.relu(self.fc1(x)))

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return l2_normalize(self.mlp(f.mean(dim=(-2, -1))))


class DenseHead(nn.Module):
    """Same MLP as :class:`GlobalHead` written as 1x1 convolutions over an S x S grid."""

    def __init__(self, in_dim, hidden_dim, out_dim, grid_size):
        super().__init__()
        self.conv1 = nn.Conv2d(in_dim, hidden_dim, 1)
        self.conv2 = nn.Conv2d(hidden_dim, out_dim, 1)
        self.grid_size = grid_size

    def forward(self, f: torch.Tensor, S: Optional[int] = None) -> torch.Tensor:
        # the 1x1 convolutions evaluated as matmuls over the pooled cells
        x = pool_cells(f, S or self.grid_size)
        x = F.relu(F.linear(x, self.conv1.weight.flatten(1), self.conv1.bias))
        x = F.linear(x, self.conv2.weight.flatten(1), self.conv2.bias)
        return l2_normalize(x)


class NetOutput(NamedTuple):
    features: torch.Tensor
    global_emb: torch.Tensor
    dense_emb: Optional[torch.Tensor]


class DenseCLNet(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg.channels, cfg.norm, cfg.residual)
        k, hc = self.backbone.out_channels, cfg.head
        self.global_head = GlobalHead(k, hc.hidden_dim, hc.out_dim)
        # constructed last so a dense-free build draws identical initial weights
        self.dense_head = DenseHead(k, hc.hidden_dim, hc.out_dim, hc.grid_size)

    @property
    def grid_size(self) -> int:
        return self.dense_head.grid_size

    def forward(self, x: torch.Tensor, dense: bool = True) -> NetOutput:
        f = self.backbone(x)
        return NetOutput(f, self.global_head(f), self.dense_head(f) if dense else None)


def backbone_forward(net: DenseCLNet, views) -> torch.Tensor:
    """Inference-mode feature maps for a batch of HxWx3 views (array or list)."""
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            return net.backbone(images_to_tensor(views))
    finally:
        net.train(was_training)


def images_to_tensor(images) -> torch.Tensor:
    """Stack ``N x H x W x 3`` arrays into a float32 ``N x 3 x H x W`` tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def pooled_dense_key(d: torch.Tensor) -> torch.Tensor:
    """Mean of the cell embeddings (``... x S*S x E``), re-normalized."""
    m = d.mean(dim=-2)
    if bool((m.norm(dim=-1) < NORM_EPS).any()):
        raise DegenerateInputError("pooled dense key has zero norm")
    return l2_normalize(m)


def sampled_dense_key(d: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """One uniformly chosen cell embedding per image."""
    if d.dim() == 2:
        return sampled_dense_key(d[None], generator)[0]
    idx = torch.randint(d.shape[1], (d.shape[0],), generator=generator)
    return d[torch.arange(d.shape[0]), idx]


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
