"""Contrastive training with entity queues, negative masks and bidirectional InfoNCE."""

from __future__ import annotations

import copy
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .encoders import (
    HyperParams,
    NumericError,
    Params,
    entity_backward,
    entity_forward,
    query_backward,
    query_forward,
    zeros_like,
)
from .kg import FilterIndex, Triple

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    queue_batches: int = 3
    learning_rate: float = 3e-3
    weight_decay: float = 0.01
    max_epochs: int = 30
    patience: int = 3
    seed: int = 0
    optimizer: str = "adamw"

    def __post_init__(self):
        if self.batch_size < 1 or self.queue_batches < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError(f"invalid training config {self}")
        if not self.learning_rate > 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be positive and weight_decay non-negative")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class LossBreakdown(NamedTuple):
    fc: float
    ac: float
    fc_rev: float
    ac_rev: float

    @property
    def total(self) -> float:
        return self.fc + self.ac + self.fc_rev + self.ac_rev


# -- queue and masks -------------------------------------------------------


class _QueuedBatch(NamedTuple):
    emb: np.ndarray
    v_bar: np.ndarray
    targets: np.ndarray
    slots: np.ndarray


class EntityQueue:
    """FIFO of the entity embeddings (and prefix means) of the last few batches.

    Entries are stored detached: they are constants for the loss.
    """

    def __init__(self, num_batches: int, dim: int):
        self.num_batches = num_batches
        self.dim = dim
        self._batches: deque[_QueuedBatch] = deque(maxlen=num_batches)
        self._next_slot = 0

    def enqueue(self, emb: np.ndarray, v_bar: np.ndarray, targets) -> np.ndarray:
        """Push one batch, evicting the oldest beyond capacity; returns its slot ids."""
        n = len(emb)
        slots = np.arange(self._next_slot, self._next_slot + n)
        self._next_slot += n
        self._batches.append(
            _QueuedBatch(np.array(emb, dtype=np.float64), np.array(v_bar, dtype=np.float64),
                         np.asarray(targets, dtype=np.int64).copy(), slots)
        )
        return slots

    def __len__(self) -> int:
        return sum(len(b.targets) for b in self._batches)

    def _cat(self, attr, shape):
        if not self._batches:
            return np.zeros(shape)
        return np.concatenate([getattr(b, attr) for b in self._batches])

    @property
    def embeddings(self) -> np.ndarray:
        return self._cat("emb", (0, self.dim))

    @property
    def v_bars(self) -> np.ndarray:
        return self._cat("v_bar", (0, self.dim))

    @property
    def targets(self) -> np.ndarray:
        return self._cat("targets", (0,)).astype(np.int64)

    @property
    def slots(self) -> np.ndarray:
        return self._cat("slots", (0,)).astype(np.int64)


def build_negative_mask(batch: list[Triple], queue: EntityQueue, train_index: FilterIndex, own_slots=None) -> np.ndarray:
    """``mask[i, j]`` is True when queue slot j is a usable negative for triple i."""
    targets = queue.targets
    slots = queue.slots
    mask = np.ones((len(batch), len(targets)), dtype=bool)
    for i, tr in enumerate(batch):
        known = train_index.lookup(tr.head, tr.relation)
        if known:
            mask[i] = ~np.isin(targets, list(known))
        if own_slots is not None:
            mask[i] &= slots != own_slots[i]
    return mask


def build_reverse_mask(batch: list[Triple], train_index: FilterIndex) -> np.ndarray:
    """``mask[i, j]`` is True when in-batch query j is a usable negative for entity i."""
    n = len(batch)
    mask = np.ones((n, n), dtype=bool)
    for i, ti in enumerate(batch):
        for j, tj in enumerate(batch):
            if i == j or train_index.contains(tj.head, tj.relation, ti.tail):
                mask[i, j] = False
    return mask


# -- InfoNCE ---------------------------------------------------------------


def _info_nce(anchors, positives, cands, mask, tau, need_grad=True):
    """Row-wise ``-log(s+ / (s+ + sum_masked s-))`` with ``s = exp(a.b / tau)``.

    Returns per-row losses and gradients w.r.t. anchors, positives, candidates.
    """
    pos = np.sum(anchors * positives, axis=1) / tau
    neg = anchors @ cands.T / tau if cands.size else np.zeros((len(anchors), 0))
    neg = np.where(mask, neg, -np.inf)
    top = np.maximum(pos, neg.max(axis=1, initial=-np.inf))
    w_pos = np.exp(pos - top)
    w_neg = np.exp(neg - top[:, None])
    z = w_pos + w_neg.sum(axis=1)
    losses = np.log(z) + top - pos
    empty = ~mask.any(axis=1)
    if empty.any():
        logger.warning("%d row(s) without usable negatives contribute zero loss", int(empty.sum()))
        losses[empty] = 0.0
    if not need_grad:
        return losses, None, None, None
    p_pos = w_pos / z
    p_neg = w_neg / z[:, None]
    g_pos = (p_pos - 1.0) / tau
    g_neg = p_neg / tau
    d_anchor = g_pos[:, None] * positives + g_neg @ cands
    d_positive = g_pos[:, None] * anchors
    d_cands = g_neg.T @ anchors
    return losses, d_anchor, d_positive, d_cands


def info_nce(anchor, positive, candidates, mask_row, tau: float) -> float:
    anchor = np.asarray(anchor, dtype=np.float64)[None]
    positive = np.asarray(positive, dtype=np.float64)[None]
    cands = np.asarray(candidates, dtype=np.float64).reshape(-1, anchor.shape[1])
    mask = np.asarray(mask_row, dtype=bool)[None]
    losses, *_ = _info_nce(anchor, positive, cands, mask, tau, need_grad=False)
    return float(losses[0])


def loss_fc(q, e_f, queue_emb, mask_row, tau: float) -> float:
    """Query-to-entity fusion contrastive loss for one triple."""
    return info_nce(q, e_f, queue_emb, mask_row, tau)


def loss_ac(q, v_bar, queue_vbar, mask_row, tau: float) -> float:
    """Query-to-prefix pre-align contrastive loss for one triple.

    ``v_bar`` is normalized here (zero stays zero); queue entries are expected
    to be normalized already.
    """
    return info_nce(q, unit_or_zero(v_bar)[0][0], queue_vbar, mask_row, tau)


def fc_modality_gradient(log_s_modal: float, log_s_f: float, log_neg_sum: float) -> float:
    """Partial derivative of the fusion loss w.r.t. one modality similarity.

    With ``s_f = prod_m s_m`` the derivative is ``-N / (s_h (s_f + N))`` where N
    is the summed negative similarity; arguments are natural logs.
    """
    if log_neg_sum == -math.inf:
        return 0.0
    # -(1/s_h) * N/(s_f+N), the second factor as a logistic in log space
    frac = 1.0 / (1.0 + math.exp(log_s_f - log_neg_sum)) if log_s_f - log_neg_sum < 700 else 0.0
    return -math.exp(-log_s_modal) * frac


def modality_gradients(q, e_v, e_d, negatives, tau: float) -> tuple[float, float]:
    """``(dL_FC/ds_v, dL_FC/ds_d)`` for a positive pair against fixed negatives."""
    log_sv = float(np.dot(q, e_v)) / tau
    log_sd = float(np.dot(q, e_d)) / tau
    negatives = np.atleast_2d(negatives)
    if negatives.size:
        logits = negatives @ q / tau
        top = logits.max()
        log_n = top + math.log(np.exp(logits - top).sum())
    else:
        log_n = -math.inf
    log_sf = log_sv + log_sd
    return fc_modality_gradient(log_sv, log_sf, log_n), fc_modality_gradient(log_sd, log_sf, log_n)


# -- batch objective -------------------------------------------------------


def unit_or_zero(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalize, leaving zero rows at zero (so their similarity is exp(0))."""
    x = np.atleast_2d(x)
    norms = np.linalg.norm(x, axis=1)
    safe = np.where(norms == 0, 1.0, norms)
    return x / safe[:, None], norms


def _unit_or_zero_backward(y, norms, dy):
    safe = np.where(norms == 0, np.inf, norms)[:, None]
    return (dy - y * np.sum(y * dy, axis=1, keepdims=True)) / safe


@dataclass
class BatchInputs:
    """Features and masks for one mini-batch.

    Queue arrays are constants: ``queue_emb`` holds fused entity embeddings and
    ``queue_vbar`` unit-normalized prefix means.
    """

    query_x: np.ndarray
    visual_x: np.ndarray
    text_x: np.ndarray
    queue_emb: np.ndarray
    queue_vbar: np.ndarray
    mask: np.ndarray
    rev_mask: np.ndarray


def loss_and_gradients(params: Params, hp: HyperParams, inputs: BatchInputs, need_grad: bool = True):
    """Summed four-part objective and (optionally) its parameter gradients."""
    tau = hp.temperature
    q, qcache = query_forward(params, inputs.query_x)
    e_f, v_bar, _, _, ecache = entity_forward(params, inputs.visual_x, inputs.text_x, hp)
    v_hat, v_norms = unit_or_zero(v_bar)

    l_fc, dq1, de1, _ = _info_nce(q, e_f, inputs.queue_emb, inputs.mask, tau, need_grad)
    l_ac, dq2, dv2, _ = _info_nce(q, v_hat, inputs.queue_vbar, inputs.mask, tau, need_grad)
    l_fcr, de3, dq3a, dq3b = _info_nce(e_f, q, q, inputs.rev_mask, tau, need_grad)
    l_acr, dv4, dq4a, dq4b = _info_nce(v_hat, q, q, inputs.rev_mask, tau, need_grad)
    breakdown = LossBreakdown(float(l_fc.sum()), float(l_ac.sum()), float(l_fcr.sum()), float(l_acr.sum()))
    if not need_grad:
        return breakdown, None
    dq = dq1 + dq2 + dq3a + dq3b + dq4a + dq4b
    de = de1 + de3
    dv = _unit_or_zero_backward(v_hat, v_norms, dv2 + dv4)
    grads = query_backward(params, qcache, dq)
    grads.update(entity_backward(params, ecache, de, dv, hp))
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    return breakdown, grads


def loss_total(params: Params, hp: HyperParams, inputs: BatchInputs) -> LossBreakdown:
    return loss_and_gradients(params, hp, inputs, need_grad=False)[0]


def compute_gradients(params: Params, hp: HyperParams, inputs: BatchInputs) -> Params:
    return loss_and_gradients(params, hp, inputs)[1]


# -- optimizers ------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay and a linearly decaying learning rate."""

    def __init__(self, params: Params, lr: float, total_steps: int, weight_decay: float = 0.01,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.total_steps = max(total_steps, 1)
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = zeros_like(params)
        self.v = zeros_like(params)
        self.step_count = 0

    def current_lr(self) -> float:
        return self.lr * max(0.0, 1.0 - self.step_count / self.total_steps)

    def step(self, params: Params, grads: Params) -> None:
        lr = self.current_lr()
        self.step_count += 1
        t = self.step_count
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1**t)
            vhat = v / (1 - self.b2**t)
            p = params[name]
            p *= 1 - lr * self.weight_decay
            p -= lr * mhat / (np.sqrt(vhat) + self.eps)


class SGD:
    def __init__(self, params: Params, lr: float, total_steps: int, weight_decay: float = 0.0):
        self.lr = lr
        self.total_steps = max(total_steps, 1)
        self.weight_decay = weight_decay
        self.step_count = 0

    def current_lr(self) -> float:
        return self.lr * max(0.0, 1.0 - self.step_count / self.total_steps)

    def step(self, params: Params, grads: Params) -> None:
        lr = self.current_lr()
        self.step_count += 1
        for name, g in grads.items():
            params[name] -= lr * (g + self.weight_decay * params[name])


# -- training loop ---------------------------------------------------------


class EarlyStopping:
    """Stop after ``patience`` epochs without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_score = -math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, score: float) -> bool:
        """Record an epoch's score; returns True when it is the new best."""
        if score > self.best_score:
            self.best_score = score
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    l_fc: float
    l_ac: float
    l_fc_rev: float
    l_ac_rev: float
    valid_hits1: float
    valid_mrr: float


@dataclass
class TrainResult:
    params: Params
    history: list[EpochRecord]
    best_epoch: int
    stopped_early: bool = False
    diverged: bool = False
    batch_losses: list[float] = field(default_factory=list)


Validator = Callable[[Params], tuple[float, float]]


def train(
    config: TrainConfig,
    hp: HyperParams,
    triples: list[Triple],
    train_index: FilterIndex,
    bank,
    params: Params,
    validate: Validator | None = None,
) -> TrainResult:
    """Run contrastive training and return the best-validation parameters.

    ``triples`` are the training triples including reversed forms; ``bank``
    supplies ``queries(triples)``, ``visual`` and ``entity_text``.
    ``validate`` maps parameters to ``(hits@1, mrr)``; without it the last
    epoch's parameters are returned.
    """
    if not triples:
        raise ValueError("training set is empty")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    rng = np.random.default_rng(config.seed)
    n = len(triples)
    batches_per_epoch = math.ceil(n / config.batch_size)
    total_steps = batches_per_epoch * config.max_epochs
    opt_cls = AdamW if config.optimizer == "adamw" else SGD
    optimizer = opt_cls(params, config.learning_rate, total_steps, weight_decay=config.weight_decay)
    queue = EntityQueue(config.queue_batches, hp.embed_dim)
    stopper = EarlyStopping(config.patience)
    best = copy.deepcopy(params)
    history: list[EpochRecord] = []
    batch_losses: list[float] = []
    targets_all = np.array([t.tail for t in triples])

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        sums = np.zeros(4)
        for b in range(batches_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            batch = [triples[i] for i in idx]
            tails = targets_all[idx]
            qx = bank.queries(batch)
            vx = bank.visual[tails]
            tx = bank.entity_text[tails]
            e_f, v_bar, *_ = entity_forward(params, vx, tx, hp)
            own = queue.enqueue(e_f, unit_or_zero(v_bar)[0], tails)
            inputs = BatchInputs(
                qx, vx, tx, queue.embeddings, queue.v_bars,
                build_negative_mask(batch, queue, train_index, own),
                build_reverse_mask(batch, train_index),
            )
            try:
                parts, grads = loss_and_gradients(params, hp, inputs)
            except NumericError as exc:
                logger.error("aborting at epoch %d: %s", epoch, exc)
                return TrainResult(best, history, stopper.best_epoch, diverged=True, batch_losses=batch_losses)
            if not math.isfinite(parts.total):
                logger.error("non-finite loss at epoch %d; returning last good parameters", epoch)
                return TrainResult(best, history, stopper.best_epoch, diverged=True, batch_losses=batch_losses)
            batch_losses.append(parts.total)
            sums += parts
            optimizer.step(params, grads)

        means = sums / n
        if validate is not None:
            hits1, mrr = validate(params)
        else:
            hits1 = mrr = math.nan
        history.append(EpochRecord(epoch, *map(float, means), float(hits1), float(mrr)))
        logger.info("epoch %d loss %.4f valid Hits@1 %.4f MRR %.4f", epoch, means.sum(), hits1, mrr)
        if validate is None:
            best = copy.deepcopy(params)
            continue
        if stopper.update(epoch, hits1):
            best = copy.deepcopy(params)
        if stopper.should_stop:
            return TrainResult(best, history, stopper.best_epoch, stopped_early=True, batch_losses=batch_losses)
    best_epoch = stopper.best_epoch if validate is not None else config.max_epochs
    return TrainResult(best, history, best_epoch, batch_losses=batch_losses)
