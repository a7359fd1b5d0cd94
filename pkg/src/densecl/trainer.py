"""Pre-training loop: query/key encoders, joint loss, SGD, momentum update, queues."""

from __future__ import annotations

import copy
import csv
import hashlib
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from densecl.augment import AugmentConfig, make_view_pair, pair_rng
from densecl.dictionary import DEFAULT_MOMENTUM, DESK_QUEUE_SIZE, KeyQueue, momentum_update
from densecl.encoder import (
    DenseCLNet,
    ModelConfig,
    images_to_tensor,
    pooled_dense_key,
    sampled_dense_key,
)
from densecl.errors import ConfigError, DenseCLError, NumericError
from densecl.loss import LossConfig, LossReport, combined_loss, dense_info_nce, info_nce, lambda_at
from densecl.matcher import DEFAULT_STRATEGY, MatchStrategy, extract_correspondence

log = logging.getLogger(__name__)

METRICS_HEADER = ("iteration", "epoch", "lr", "l_global", "l_dense", "l_total", "step_ms")


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.06
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    key_momentum: float = DEFAULT_MOMENTUM
    global_queue_size: int = DESK_QUEUE_SIZE
    dense_queue_size: int = DESK_QUEUE_SIZE
    negative_mode: str = "pooled"  # "pooled" | "sampled"
    match: MatchStrategy = DEFAULT_STRATEGY
    # False builds the global-only (MoCo-v2) pipeline: no dense head pass, no dense queue
    dense_pathway: bool = True
    deterministic: bool = True
    checkpoint_every: int = 10
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if not self.base_lr > 0:
            raise ConfigError(f"train.base_lr must be > 0, got {self.base_lr}")
        if not 0.0 <= self.sgd_momentum < 1.0:
            raise ConfigError(f"train.sgd_momentum must be in [0, 1), got {self.sgd_momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"train.weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.key_momentum <= 1.0:
            raise ConfigError(f"train.key_momentum must be in [0, 1], got {self.key_momentum}")
        for name in ("global_queue_size", "dense_queue_size"):
            if getattr(self, name) < self.batch_size:
                raise ConfigError(f"queue.{name.split('_')[0]}_size must be >= train.batch_size "
                                  f"({self.batch_size}), got {getattr(self, name)}")
        if self.negative_mode not in ("pooled", "sampled"):
            raise ConfigError(
                f"dictionary.negative_mode must be pooled|sampled, got {self.negative_mode!r}")
        if self.checkpoint_every < 0:
            raise ConfigError("train.checkpoint_every must be >= 0")
        object.__setattr__(self, "match", MatchStrategy(self.match))
        if not self.dense_pathway and (self.loss.lam != 0 or
                                       (self.loss.warmup_iters and self.loss.warmup_lambda != 0)):
            raise ConfigError(
                "train.dense_pathway=false requires loss.lambda=0 (and warm-up lambda 0)")
        if self.model.head.grid_size > self.augment.out_size // self.model.stride:
            raise ConfigError(
                f"model.grid_size={self.model.head.grid_size} exceeds the backbone map side "
                f"{self.augment.out_size // self.model.stride}")

    @property
    def grid_size(self) -> int:
        return self.model.head.grid_size


@dataclass
class TrainState:
    query: DenseCLNet
    key: DenseCLNet
    momentum_buffers: list
    global_queue: KeyQueue
    dense_queue: KeyQueue
    generator: torch.Generator
    cfg: TrainConfig
    iteration: int = 0
    total_iterations: int = 0


@dataclass
class ViewBatch:
    views_a: torch.Tensor
    views_b: torch.Tensor
    pairs: list


def cosine_lr(iteration: int, total_iterations: int, base_lr: float) -> float:
    if total_iterations <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * iteration / total_iterations))


@torch.no_grad()
def sgd_update(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor],
               momentum_buffers: Sequence[torch.Tensor], lr: float, mu: float = 0.9,
               wd: float = 1e-4):
    """SGD with momentum and L2 weight decay, in place.

    ``g = grad + wd * p``; ``buf = mu * buf + g``; ``p -= lr * buf``.
    """
    for g in grads:
        if not bool(torch.isfinite(g).all()):
            raise NumericError("non-finite gradient; step aborted")
    for p, g, buf in zip(params, grads, momentum_buffers):
        d = g.add(p, alpha=wd) if wd else g
        buf.mul_(mu).add_(d)
        p.sub_(buf, alpha=lr)
    return params, momentum_buffers


def build_state(cfg: TrainConfig, total_iterations: int = 0) -> TrainState:
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        query = DenseCLNet(cfg.model)
    key = copy.deepcopy(query)
    for p in key.parameters():
        p.requires_grad_(False)
    e = cfg.model.head.out_dim
    return TrainState(
        query=query,
        key=key,
        momentum_buffers=[torch.zeros_like(p) for p in query.parameters()],
        global_queue=KeyQueue(cfg.global_queue_size, e),
        dense_queue=KeyQueue(cfg.dense_queue_size, e),
        generator=torch.Generator().manual_seed(cfg.seed + 1),
        cfg=cfg,
        total_iterations=total_iterations,
    )


def _bn_buffers(state: TrainState) -> list:
    return list(state.query.buffers()) + list(state.key.buffers())


def _directional_losses(state, cfg, q_out, k_out):
    tau, literal = cfg.loss.temperature, cfg.loss.literal_denominator
    l_g = info_nce(q_out.global_emb, k_out.global_emb, state.global_queue.negatives_view(),
                   tau, literal)
    if not cfg.dense_pathway:
        return l_g, torch.zeros((), dtype=l_g.dtype)
    corr = extract_correspondence(cfg.match, q_out.features, k_out.features,
                                  q_out.dense_emb, k_out.dense_emb, cfg.grid_size, state.generator)
    l_d = dense_info_nce(q_out.dense_emb, k_out.dense_emb, corr,
                         state.dense_queue.negatives_view(), tau, literal)
    return l_g, l_d


def joint_loss(state: TrainState, views_a: torch.Tensor, views_b: torch.Tensor, lam: float,
               cfg: Optional[TrainConfig] = None):
    """Forward both encoders and return ``(l_total, l_global, l_dense, key_outputs)``.

    Differentiable w.r.t. the query encoder only.
    """
    cfg = cfg or state.cfg
    dense = cfg.dense_pathway
    q_out = state.query(views_a, dense=dense)
    with torch.no_grad():
        k_out = state.key(views_b, dense=dense)
    l_g, l_d = _directional_losses(state, cfg, q_out, k_out)
    if cfg.loss.symmetric:
        q2 = state.query(views_b, dense=dense)
        with torch.no_grad():
            k2 = state.key(views_a, dense=dense)
        l_g2, l_d2 = _directional_losses(state, cfg, q2, k2)
        l_g, l_d = 0.5 * (l_g + l_g2), 0.5 * (l_d + l_d2)
    return combined_loss(l_g, l_d, lam), l_g, l_d, k_out


def train_step(batch: ViewBatch, state: TrainState,
               cfg: Optional[TrainConfig] = None) -> tuple[TrainState, LossReport]:
    """One optimisation step. On a numeric failure the state is left unchanged."""
    cfg = cfg or state.cfg
    lam = lambda_at(state.iteration, cfg.loss)
    lr = cosine_lr(state.iteration, state.total_iterations, cfg.base_lr)
    buffers = _bn_buffers(state)
    saved_buffers = [b.clone() for b in buffers]
    saved_rng = state.generator.get_state()
    params = list(state.query.parameters())
    try:
        state.query.train()
        state.key.train()
        for p in params:
            p.grad = None
        total, l_g, l_d, k_out = joint_loss(state, batch.views_a, batch.views_b, lam, cfg)
        if not bool(torch.isfinite(total)):
            raise NumericError(f"non-finite loss at iteration {state.iteration}")
        total.backward()
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in params]
        sgd_update(params, grads, state.momentum_buffers, lr, cfg.sgd_momentum, cfg.weight_decay)
    except NumericError:
        with torch.no_grad():
            for b, s in zip(buffers, saved_buffers):
                b.copy_(s)
        state.generator.set_state(saved_rng)
        for p in params:
            p.grad = None
        raise

    momentum_update(state.key.parameters(), params, cfg.key_momentum)
    state.global_queue.enqueue(k_out.global_emb)
    if cfg.dense_pathway:
        if cfg.negative_mode == "sampled":
            state.dense_queue.enqueue(sampled_dense_key(k_out.dense_emb, state.generator))
        else:
            state.dense_queue.enqueue(pooled_dense_key(k_out.dense_emb))
    state.iteration += 1
    return state, LossReport(l_g.item(), l_d.item(), total.item(), lam)


def steps_per_epoch(n_images: int, batch_size: int) -> int:
    return math.ceil(n_images / batch_size)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)


def make_batch(images, indices, epoch: int, cfg: TrainConfig,
               executor: Optional[ThreadPoolExecutor] = None) -> ViewBatch:
    def one(i):
        return make_view_pair(images[i], pair_rng(cfg.seed, epoch, int(i)), cfg.augment, int(i))

    pairs = list(executor.map(one, indices)) if executor else [one(i) for i in indices]
    return ViewBatch(images_to_tensor([p.view_a for p in pairs]),
                     images_to_tensor([p.view_b for p in pairs]), pairs)


def batch_at(images, iteration: int, cfg: TrainConfig, executor=None) -> ViewBatch:
    """The batch consumed at a given global iteration (deterministic in ``cfg.seed``)."""
    spe = steps_per_epoch(len(images), cfg.batch_size)
    epoch, k = divmod(iteration, spe)
    order = epoch_order(cfg.seed, epoch, len(images))
    return make_batch(images, order[k * cfg.batch_size:(k + 1) * cfg.batch_size], epoch, cfg,
                      executor)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("DCL_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class StepRecord:
    iteration: int
    epoch: int
    lr: float
    l_global: float
    l_dense: float
    l_total: float
    step_ms: float


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def epoch_mean(self, epoch: int, key: str = "l_total") -> float:
        vals = [getattr(s, key) for s in self.steps if s.epoch == epoch]
        return float(np.mean(vals))


def _summarise_epoch(steps: list) -> StepRecord:
    last = steps[-1]
    return StepRecord(
        iteration=last.iteration + 1,
        epoch=last.epoch,
        lr=last.lr,
        l_global=float(np.mean([s.l_global for s in steps])),
        l_dense=float(np.mean([s.l_dense for s in steps])),
        l_total=float(np.mean([s.l_total for s in steps])),
        step_ms=float(np.mean([s.step_ms for s in steps])),
    )


def _append_metrics(path: Path, rec: StepRecord) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(METRICS_HEADER)
        w.writerow([rec.iteration, rec.epoch, f"{rec.lr:.8g}", f"{rec.l_global:.8g}",
                    f"{rec.l_dense:.8g}", f"{rec.l_total:.8g}", f"{rec.step_ms:.3f}"])


def configure_determinism(cfg: TrainConfig) -> None:
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)


def train(images, cfg: TrainConfig, out_dir=None, state: Optional[TrainState] = None,
          stop_at: Optional[int] = None,
          on_step: Optional[Callable[[StepRecord], None]] = None) -> tuple[TrainState, TrainLog]:
    """Run ``cfg.epochs`` epochs (or resume ``state`` up to ``stop_at`` iterations).

    Writes ``metrics.csv`` (one row per epoch) and checkpoints into ``out_dir``
    when given.  ``step_ms`` covers batch assembly plus the optimisation step.
    """
    from densecl.checkpoint import save_checkpoint

    if len(images) == 0:
        raise DenseCLError("cannot train on an empty dataset")
    configure_determinism(cfg)
    spe = steps_per_epoch(len(images), cfg.batch_size)
    total = cfg.epochs * spe
    if state is None:
        state = build_state(cfg, total)
    state.total_iterations = total
    end = total if stop_at is None else min(stop_at, total)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    tlog = TrainLog()
    workers = worker_count()
    executor = ThreadPoolExecutor(workers) if workers > 1 else None
    epoch_steps: list = []
    try:
        while state.iteration < end:
            it = state.iteration
            epoch = it // spe
            t0 = time.perf_counter()
            batch = batch_at(images, it, cfg, executor)
            lr = cosine_lr(it, total, cfg.base_lr)
            _, rep = train_step(batch, state, cfg)
            rec = StepRecord(it, epoch, lr, rep.l_global, rep.l_dense, rep.l_total,
                             1000.0 * (time.perf_counter() - t0))
            tlog.steps.append(rec)
            epoch_steps.append(rec)
            if on_step is not None:
                on_step(rec)
            if state.iteration % spe == 0 or state.iteration == end:
                summary = _summarise_epoch(epoch_steps)
                epoch_steps = []
                tlog.epochs.append(summary)
                log.info("epoch %d it %d lr %.4g l_global %.4f l_dense %.4f l_total %.4f "
                         "%.0f ms/step", summary.epoch, summary.iteration, summary.lr,
                         summary.l_global, summary.l_dense, summary.l_total, summary.step_ms)
                if out is not None:
                    _append_metrics(out / "metrics.csv", summary)
                    done_epochs = state.iteration // spe
                    if (state.iteration % spe == 0 and cfg.checkpoint_every
                            and done_epochs % cfg.checkpoint_every == 0):
                        save_checkpoint(state, out / f"epoch_{done_epochs:04d}.ckpt")
    finally:
        if executor is not None:
            executor.shutdown()
    if out is not None:
        save_checkpoint(state, out / "final.ckpt")
    return state, tlog


def state_hash(state: TrainState) -> str:
    """SHA-256 over every query/key parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for prefix, net in (("query", state.query), ("key", state.key)):
        for name, t in net.state_dict().items():
            h.update(f"{prefix}/{name}".encode())
            h.update(t.detach().contiguous().cpu().numpy().tobytes())
    return h.hexdigest()
