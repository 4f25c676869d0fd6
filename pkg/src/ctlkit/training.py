"""SGD training of an encoder under the centroid triplet loss.

Each epoch regenerates and packs triplets with a per-epoch seeded stream,
then consumes batches in synchronous rounds of one batch per worker: every
batch gradient in a round is computed against the same encoder state, the
gradients are reduced in worker-index order, and one SGD step is applied
with their mean. With a single worker this is plain per-batch SGD. The
``jobs`` thread pool only parallelizes the gradient computations inside a
round, so results are independent of it by construction.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .backbone import Encoder, LrSchedule, ParamGrads, encode, encoder_backward, lr_at, sgd_step
from .batching import TripletBatch, plan_epoch
from .codec import IdentificationData
from .ctl import compute_centroids, ctl_backward, ctl_forward, scatter_centroid_grads
from .evaluation import EvalProtocol, recall_at_k, retrieval_cases
from .matcher import IndexMode


@dataclass(frozen=True)
class TrainConfig:
    """Batch budget, hinge margin, LR schedule and sampling knobs."""

    batch_size: int
    margin: float
    schedule: LrSchedule
    seed: int
    single_query_prob: float = 0.5
    workers: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.margin < 0 or not np.isfinite(self.margin):
            raise ValueError("margin must be finite and >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if not 0.0 <= self.single_query_prob <= 1.0:
            raise ValueError("single_query_prob must be in [0, 1]")


def batch_loss_and_grads(
    encoder: Encoder, descriptors: np.ndarray, batch: TripletBatch, margin: float
) -> tuple[float, ParamGrads]:
    """Mean triplet loss of one batch and its exact parameter gradients."""
    x = descriptors[batch.rows]
    emb = encode(encoder, x)
    centroids = compute_centroids(emb, batch.index)
    n = len(batch.triplet_ids)
    loss = 0.0
    grad_c = np.zeros_like(centroids)
    for t in batch.triplet_ids:
        ca, cp, cn = centroids[t.anchor], centroids[t.positive], centroids[t.negative]
        loss += ctl_forward(ca, cp, cn, margin)
        ga, gp, gn = ctl_backward(ca, cp, cn, margin)
        grad_c[t.anchor] += ga / n
        grad_c[t.positive] += gp / n
        grad_c[t.negative] += gn / n
    grad_emb = scatter_centroid_grads(grad_c, batch.index)
    grads = encoder_backward(encoder, x, grad_emb)
    return loss / n, grads


def _reduce_mean(grads_list: list[ParamGrads]) -> ParamGrads:
    """Sum in worker-index order, then divide by the round's batch count."""
    acc_w = [g.copy() for g in grads_list[0].weights]
    acc_b = [g.copy() for g in grads_list[0].biases]
    for grads in grads_list[1:]:
        for a, g in zip(acc_w, grads.weights):
            a += g
        for a, g in zip(acc_b, grads.biases):
            a += g
    k = len(grads_list)
    return ParamGrads(weights=[a / k for a in acc_w], biases=[a / k for a in acc_b])


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    lr: float
    mean_loss: float
    holdout_recall1: float | None


def train_epoch(
    encoder: Encoder,
    data: IdentificationData,
    config: TrainConfig,
    epoch: int,
    jobs: int = 1,
) -> float:
    """Run one epoch in place; returns the triplet-weighted mean loss."""
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0, epoch)))
    plan = plan_epoch(
        data.gallery,
        data.picks,
        rng,
        budget=config.batch_size,
        n_workers=config.workers,
        single_query_prob=config.single_query_prob,
    )
    lr = lr_at(config.schedule, epoch)
    total_loss = 0.0
    total_triplets = 0

    def grad_of(batch: TripletBatch):
        return batch_loss_and_grads(encoder, data.descriptors, batch, config.margin)

    pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        for start in range(0, len(plan.batches), config.workers):
            round_batches = plan.batches[start : start + config.workers]
            if pool is not None and len(round_batches) > 1:
                outcomes = list(pool.map(grad_of, round_batches))
            else:
                outcomes = [grad_of(b) for b in round_batches]
            for batch, (loss, _) in zip(round_batches, outcomes):
                if not np.isfinite(loss):
                    raise ValueError(f"non-finite loss {loss} in epoch {epoch}")
                total_loss += loss * len(batch.triplet_ids)
                total_triplets += len(batch.triplet_ids)
            sgd_step(encoder, _reduce_mean([g for _, g in outcomes]), lr)
    finally:
        if pool is not None:
            pool.shutdown()
    return total_loss / total_triplets if total_triplets else 0.0


def holdout_recall1(encoder: Encoder, holdout: IdentificationData | None) -> float | None:
    """Recall@1 on labeled holdout picks (post-pick protocol, centroid mode)."""
    if holdout is None:
        return None
    labeled = [p for p in holdout.picks if p.gt_object_id is not None]
    if not labeled:
        return None
    subset = IdentificationData(
        descriptors=holdout.descriptors, gallery=holdout.gallery, picks=tuple(labeled)
    )
    cases = retrieval_cases(subset, encoder, EvalProtocol.POST_PICK, IndexMode.CENTROID)
    return recall_at_k(cases, 1)


def split_picks(picks, holdout_fraction: float, seed: int):
    """Seeded shuffle-split into (train_picks, holdout_picks)."""
    if not 0.0 <= holdout_fraction < 1.0:
        raise ValueError("holdout fraction must be in [0, 1)")
    picks = list(picks)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 1)))
    order = rng.permutation(len(picks))
    n_hold = int(round(holdout_fraction * len(picks)))
    hold_idx = set(int(i) for i in order[:n_hold])
    train = [p for i, p in enumerate(picks) if i not in hold_idx]
    hold = [p for i, p in enumerate(picks) if i in hold_idx]
    return train, hold


def train(
    encoder: Encoder,
    data: IdentificationData,
    config: TrainConfig,
    holdout: IdentificationData | None = None,
    start_epoch: int = 0,
    jobs: int = 1,
) -> list[EpochStats]:
    """Train in place from ``start_epoch`` to the end of the schedule.

    ``data.picks`` are the training picks; ``holdout`` (same gallery,
    disjoint picks) is only used for the per-epoch recall metric.
    """
    stats = []
    for epoch in range(start_epoch, config.schedule.total_epochs):
        mean_loss = train_epoch(encoder, data, config, epoch, jobs=jobs)
        stats.append(
            EpochStats(
                epoch=epoch,
                lr=lr_at(config.schedule, epoch),
                mean_loss=mean_loss,
                holdout_recall1=holdout_recall1(encoder, holdout),
            )
        )
    return stats
