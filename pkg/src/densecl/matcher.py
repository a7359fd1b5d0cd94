"""Cross-view correspondence: cosine similarity, per-query argmax, mutual matches."""

from __future__ import annotations

import enum
from typing import Optional

import torch

from densecl.encoder import NORM_EPS, l2_normalize, pool_cells
from densecl.errors import DegenerateInputError, ShapeError


class MatchStrategy(str, enum.Enum):
    RANDOM = "random"
    MAX_SIM_THETA = "max_sim_theta"
    MAX_SIM_F = "max_sim_f"


DEFAULT_STRATEGY = MatchStrategy.MAX_SIM_F


def _unit_rows(x: torch.Tensor) -> torch.Tensor:
    n = x.norm(dim=-1, keepdim=True)
    if bool((n <= NORM_EPS).any()):
        raise DegenerateInputError("cosine similarity of a zero vector is undefined")
    return x / n


def cosine_similarity(u, v) -> float:
    u = torch.as_tensor(u, dtype=torch.float64)
    v = torch.as_tensor(v, dtype=torch.float64)
    return float((_unit_rows(u) * _unit_rows(v)).sum())


def similarity_matrix(a: torch.Tensor, b: torch.Tensor, strict: bool = True) -> torch.Tensor:
    """``delta[..., i, j] = cos(a_i, b_j)`` for row sets ``... x n x D`` and ``... x m x D``.

    With ``strict=False`` zero rows are tolerated and score 0 against everything,
    which the training path needs (an all-zero ReLU cell must not abort a step).
    """
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"feature dims differ: {a.shape[-1]} vs {b.shape[-1]}")
    unit = _unit_rows if strict else l2_normalize
    return unit(a) @ unit(b).transpose(-1, -2)


def argmax_match(delta: torch.Tensor) -> torch.Tensor:
    """Index of the most similar key per query row; ties go to the lowest index."""
    # torch.argmax returns the first maximal index
    return delta.argmax(dim=-1)


def pooled_cells(f: torch.Tensor, S: int) -> torch.Tensor:
    """``B x K x h x w`` feature map -> ``B x S*S x K`` pooled cell vectors."""
    return pool_cells(f, S)


def extract_correspondence(strategy: MatchStrategy, f1: torch.Tensor, f2: torch.Tensor,
                           d1: Optional[torch.Tensor], d2: Optional[torch.Tensor], S: int,
                           generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Correspondence ``B x S*S`` from view-1 cells to view-2 cells."""
    strategy = MatchStrategy(strategy)
    with torch.no_grad():
        if strategy is MatchStrategy.MAX_SIM_F:
            sim = similarity_matrix(pooled_cells(f1, S), pooled_cells(f2, S), strict=False)
            return argmax_match(sim)
        if strategy is MatchStrategy.MAX_SIM_THETA:
            if d1.shape[-2] != S * S or d2.shape[-2] != S * S:
                raise ShapeError(f"dense embeddings do not have {S * S} cells")
            return argmax_match(similarity_matrix(d1, d2, strict=False))
        batch = f1.shape[0]
        return torch.randint(S * S, (batch, S * S), generator=generator)


def mutual_matches(f1: torch.Tensor, f2: torch.Tensor, threshold: float = 0.9):
    """Reciprocal nearest neighbours between two ``K x h x w`` feature maps.

    Returns ``(i, j, avg_sim)`` tuples sorted by ``i``.  ``avg_sim`` is the mean
    of the similarity read from each direction.
    """
    if f1.shape != f2.shape:
        raise ShapeError(f"feature maps differ in shape: {tuple(f1.shape)} vs {tuple(f2.shape)}")
    a = f1.flatten(-2).transpose(-1, -2).double()
    b = f2.flatten(-2).transpose(-1, -2).double()
    d12 = similarity_matrix(a, b, strict=False)
    d21 = similarity_matrix(b, a, strict=False)
    fwd = argmax_match(d12)
    bwd = argmax_match(d21)
    out = []
    for i, j in enumerate(fwd.tolist()):
        if bwd[j] != i:
            continue
        sim = 0.5 * (float(d12[i, j]) + float(d21[j, i]))
        if sim >= threshold:
            out.append((i, j, sim))
    return out
