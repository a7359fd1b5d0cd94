"""InfoNCE at the global and dense level, the weighted joint objective, and the
lambda warm-up schedule."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch.autograd.function import once_differentiable

from densecl.errors import ConfigError, NumericError, ShapeError

DEFAULT_TEMPERATURE = 0.2
DEFAULT_LAMBDA = 0.5


@dataclass(frozen=True)
class LossConfig:
    temperature: float = DEFAULT_TEMPERATURE
    lam: float = DEFAULT_LAMBDA
    warmup_iters: int = 0
    warmup_lambda: float = 0.0
    # apply 1/tau to the positive term only in the numerator (the printed form)
    literal_denominator: bool = False
    symmetric: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"loss.temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"loss.lambda must be in [0, 1], got {self.lam}")
        if not 0.0 <= self.warmup_lambda <= 1.0:
            raise ConfigError(f"loss.warmup_lambda must be in [0, 1], got {self.warmup_lambda}")
        if self.warmup_iters < 0:
            raise ConfigError(f"loss.warmup_iters must be >= 0, got {self.warmup_iters}")


@dataclass(frozen=True)
class LossReport:
    l_global: float
    l_dense: float
    l_total: float
    lambda_used: float


def _check_finite(*tensors):
    for t in tensors:
        if not bool(torch.isfinite(t).all()):
            raise NumericError("non-finite value in loss input")


# logits per chunk: a few MB, small enough for glibc to recycle heap blocks instead of
# mapping fresh (page-faulting) memory for every step's ``B x S^2 x N`` tensor
_CHUNK_ELEMENTS = 1 << 19


class _NegativeLogSumExp(torch.autograd.Function):
    """``logsumexp(q @ negatives.T, -1)`` computed over row chunks.

    Each chunk's shifted exponentials are kept for the backward pass, so the
    logits are formed once.
    """

    @staticmethod
    def forward(ctx, q, negatives):
        rows = q.reshape(-1, q.shape[-1])
        chunk = max(1, _CHUNK_ELEMENTS // negatives.shape[0])
        out, saved = [], []
        for lo in range(0, rows.shape[0], chunk):
            e = rows[lo:lo + chunk] @ negatives.T
            m = e.amax(dim=-1)
            s = e.sub_(m[:, None]).exp_().sum(dim=-1)
            out.append(m + s.log())
            saved += [e, s]
        ctx.save_for_backward(q, negatives, *saved)
        return (torch.cat(out) if out else rows.new_empty(0)).reshape(q.shape[:-1])

    @staticmethod
    @once_differentiable
    def backward(ctx, grad):
        q, negatives, *saved = ctx.saved_tensors
        rows, grad = q.reshape(-1, q.shape[-1]), grad.reshape(-1)
        grad_q = torch.empty_like(rows) if ctx.needs_input_grad[0] else None
        grad_n = torch.zeros_like(negatives) if ctx.needs_input_grad[1] else None
        buf, lo = (torch.empty_like(saved[0]) if saved else None), 0
        for e, s in zip(saved[::2], saved[1::2]):
            hi = lo + e.shape[0]
            # softmax weights times the incoming gradient
            w = torch.mul(e, (grad[lo:hi] / s)[:, None], out=buf[:hi - lo])
            if grad_q is not None:
                torch.mm(w, negatives, out=grad_q[lo:hi])
            if grad_n is not None:
                grad_n.addmm_(w.T, rows[lo:hi])
            lo = hi
        return None if grad_q is None else grad_q.reshape(q.shape), grad_n


def info_nce_terms(q: torch.Tensor, k_plus: torch.Tensor, negatives: Optional[torch.Tensor],
                   tau: float, literal_denominator: bool = False) -> torch.Tensor:
    """Per-query InfoNCE for queries ``... x E`` against one shared negative set ``N x E``."""
    if not tau > 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    if negatives is None:
        negatives = q.new_zeros((0, q.shape[-1]))
    _check_finite(q, k_plus, negatives)
    pos = (q * k_plus).sum(-1)
    pos_logit = pos / tau
    first = pos if literal_denominator else pos_logit
    if negatives.shape[0] == 0:
        return first - pos_logit
    # scale the small operand and skip the concat
    neg_lse = _NegativeLogSumExp.apply(q / tau, negatives.to(q.dtype))
    return torch.logaddexp(first, neg_lse) - pos_logit


def info_nce(q: torch.Tensor, k_plus: torch.Tensor, negatives: Optional[torch.Tensor],
             tau: float = DEFAULT_TEMPERATURE, literal_denominator: bool = False) -> torch.Tensor:
    """Mean InfoNCE over the leading dims of ``q`` (a scalar for a single query)."""
    return info_nce_terms(q, k_plus, negatives, tau, literal_denominator).mean()


def dense_info_nce(queries: torch.Tensor, keys: torch.Tensor, corr: torch.Tensor,
                   negatives: Optional[torch.Tensor], tau: float = DEFAULT_TEMPERATURE,
                   literal_denominator: bool = False) -> torch.Tensor:
    """Average over all S*S queries of InfoNCE against the corresponding key cell.

    ``queries``/``keys`` are ``[B x] S*S x E``; ``corr`` is ``[B x] S*S`` with
    ``keys[corr[s]]`` the positive for ``queries[s]``.
    """
    if queries.shape != keys.shape:
        raise ShapeError(f"query/key grids differ: {tuple(queries.shape)} vs {tuple(keys.shape)}")
    if corr.shape != queries.shape[:-1]:
        raise ShapeError(f"correspondence shape {tuple(corr.shape)} does not match "
                         f"{tuple(queries.shape[:-1])}")
    n = queries.shape[-2]
    if bool(((corr < 0) | (corr >= n)).any()):
        raise ShapeError("correspondence index out of range")
    idx = corr.unsqueeze(-1).expand(*corr.shape, keys.shape[-1])
    positives = torch.gather(keys, -2, idx)
    return info_nce_terms(queries, positives, negatives, tau, literal_denominator).mean()


def combined_loss(l_global, l_dense, lam: float):
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must be in [0, 1], got {lam}")
    return (1.0 - lam) * l_global + lam * l_dense


def lambda_at(iteration: int, cfg: LossConfig) -> float:
    if iteration < cfg.warmup_iters:
        return cfg.warmup_lambda
    return cfg.lam
