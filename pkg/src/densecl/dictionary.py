"""Momentum key encoder update and the FIFO key queues holding negatives."""

from __future__ import annotations

from typing import Iterable

import torch

from densecl.errors import ConfigError, QueueContractError, ShapeError

DEFAULT_MOMENTUM = 0.999
FULL_QUEUE_SIZE = 65536
DESK_QUEUE_SIZE = 4096


class KeyQueue:
    """Fixed-capacity ring of unit-norm key vectors, evicting oldest first.

    ``head`` is the next write slot; once full, it also points at the oldest row.
    """

    def __init__(self, capacity: int, dim: int, dtype: torch.dtype = torch.float32):
        if capacity < 1 or dim < 1:
            raise ConfigError(f"queue capacity and dim must be >= 1, got {capacity}, {dim}")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.buffer = torch.zeros(self.capacity, self.dim, dtype=dtype)
        self.head = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    @torch.no_grad()
    def enqueue(self, keys: torch.Tensor) -> "KeyQueue":
        if keys.dim() != 2 or keys.shape[1] != self.dim:
            raise ShapeError(f"expected keys of shape [B, {self.dim}], got {tuple(keys.shape)}")
        n = keys.shape[0]
        if n > self.capacity:
            raise ShapeError(f"batch of {n} keys exceeds queue capacity {self.capacity}")
        if n == 0:
            return self
        keys = keys.detach().to(self.buffer.dtype)
        err = (keys.double().norm(dim=1) - 1.0).abs().max()
        if err > 1e-3:
            raise QueueContractError(f"keys must be unit-norm (max deviation {float(err):.2e})")
        end = self.head + n
        if end <= self.capacity:
            self.buffer[self.head:end] = keys
        else:
            first = self.capacity - self.head
            self.buffer[self.head:] = keys[:first]
            self.buffer[:end - self.capacity] = keys[first:]
        self.head = end % self.capacity
        self.size = min(self.size + n, self.capacity)
        return self

    def negatives_view(self) -> torch.Tensor:
        """Copy of the stored keys, oldest first."""
        if self.size < self.capacity:
            return self.buffer[:self.size].clone()
        return torch.cat([self.buffer[self.head:], self.buffer[:self.head]])


@torch.no_grad()
def momentum_update(key_params: Iterable[torch.Tensor], query_params: Iterable[torch.Tensor],
                    m: float = DEFAULT_MOMENTUM) -> None:
    """In place: ``key <- m * key + (1 - m) * query`` for every parameter pair."""
    if not 0.0 <= m <= 1.0:
        raise ConfigError(f"momentum must be in [0, 1], got {m}")
    key_params, query_params = list(key_params), list(query_params)
    if len(key_params) != len(query_params):
        raise ShapeError(f"parameter count mismatch: {len(key_params)} vs {len(query_params)}")
    for k, q in zip(key_params, query_params):
        if k.shape != q.shape:
            raise ShapeError(f"parameter shape mismatch: {tuple(k.shape)} vs {tuple(q.shape)}")
    for k, q in zip(key_params, query_params):
        k.mul_(m).add_(q.detach(), alpha=1.0 - m)
