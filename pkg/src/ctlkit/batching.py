"""Epoch triplet generation, greedy batch packing, and worker partitioning.

An epoch makes one triplet per labeled pick: the pick's query object as
anchor, the gallery object it names as positive, and a uniformly sampled
other gallery object as negative. Triplets are packed greedily into batches
holding at most a fixed image budget; a triplet larger than the whole budget
forms a singleton batch rather than being split, so objects are always fed
whole. Batches are dealt round-robin across workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import ObjectRecord, PickRecord
from .ctl import CentroidIndex, QueryRep, TripletIds, sample_query_representation


@dataclass(frozen=True)
class Triplet:
    """One anchor/positive/negative unit of training work."""

    query: PickRecord
    positive: ObjectRecord
    negative: ObjectRecord
    query_rep: QueryRep = QueryRep.ALL_IMAGES

    def __post_init__(self):
        if self.query.gt_object_id != self.positive.object_id:
            raise ValueError("positive object must match the pick's gt_object_id")
        if self.negative.object_id == self.positive.object_id:
            raise ValueError("negative object must differ from the positive")

    @property
    def query_rows(self) -> tuple[int, ...]:
        rows = self.query.query_object.image_refs
        if self.query_rep is QueryRep.FIRST_IMAGE_ONLY:
            return rows[:1]
        return rows

    @property
    def image_count(self) -> int:
        return (
            len(self.query_rows)
            + len(self.positive.image_refs)
            + len(self.negative.image_refs)
        )


@dataclass(frozen=True)
class TripletBatch:
    """Packed descriptor rows with centroid bookkeeping for one batch.

    ``rows`` are indices into the dataset descriptor matrix, grouped per
    centroid in triplet order (query, positive, negative). Every centroid is
    referenced by exactly one triplet role and ids are contiguous.
    """

    triplets: tuple[Triplet, ...]
    rows: np.ndarray  # (image_count,) int64
    index: CentroidIndex
    triplet_ids: tuple[TripletIds, ...]

    @property
    def image_count(self) -> int:
        return int(self.rows.size)

    @classmethod
    def from_triplets(cls, triplets) -> "TripletBatch":
        triplets = tuple(triplets)
        index, triplet_ids, rows = build_centroid_index(triplets)
        return cls(triplets=triplets, rows=rows, index=index, triplet_ids=triplet_ids)


@dataclass(frozen=True)
class EpochPlan:
    """All batches of one epoch plus their round-robin worker assignment."""

    batches: tuple[TripletBatch, ...]
    worker_of: np.ndarray  # (n_batches,) int64
    n_workers: int


def generate_triplets(
    gallery,
    picks,
    rng: np.random.Generator,
    single_query_prob: float = 0.5,
) -> list[Triplet]:
    """One triplet per labeled pick, in seeded-shuffled pick order.

    Negatives are drawn uniformly from the other gallery objects. Each
    triplet's query representation is sampled independently: with
    ``single_query_prob`` the anchor is the first query image alone.
    """
    gallery = list(gallery)
    if len(gallery) < 2:
        raise ValueError("triplet generation needs at least 2 gallery objects")
    by_id = {o.object_id: i for i, o in enumerate(gallery)}
    labeled = [p for p in picks if p.gt_object_id is not None]
    for p in labeled:
        if p.gt_object_id not in by_id:
            raise ValueError(
                f"pick {p.pick_id!r} names unknown gallery object {p.gt_object_id!r}"
            )
    order = rng.permutation(len(labeled))
    triplets = []
    for i in order:
        pick = labeled[int(i)]
        pos_idx = by_id[pick.gt_object_id]
        neg_idx = int(rng.integers(len(gallery) - 1))
        if neg_idx >= pos_idx:
            neg_idx += 1
        rep = sample_query_representation(
            rng, pick.query_object.image_refs, single_query_prob
        )
        triplets.append(
            Triplet(
                query=pick,
                positive=gallery[pos_idx],
                negative=gallery[neg_idx],
                query_rep=rep,
            )
        )
    return triplets


def pack_batches(triplets, budget: int) -> list[TripletBatch]:
    """Greedy packing: a triplet joins the current batch iff it still fits.

    Otherwise the batch is sealed and a new one starts. A triplet larger
    than the whole budget becomes a singleton batch.
    """
    if budget < 1:
        raise ValueError("batch image budget must be >= 1")
    batches: list[TripletBatch] = []
    current: list[Triplet] = []
    current_count = 0
    for t in triplets:
        if current and current_count + t.image_count > budget:
            batches.append(TripletBatch.from_triplets(current))
            current, current_count = [], 0
        current.append(t)
        current_count += t.image_count
        if current_count > budget:  # oversized triplet, alone by construction
            batches.append(TripletBatch.from_triplets(current))
            current, current_count = [], 0
    if current:
        batches.append(TripletBatch.from_triplets(current))
    return batches


def partition_batches(n_batches: int, n_workers: int) -> np.ndarray:
    """Round-robin worker id per batch index; loads differ by at most 1."""
    if n_workers < 1:
        raise ValueError("need at least one worker")
    return np.arange(n_batches, dtype=np.int64) % n_workers


def build_centroid_index(triplets) -> tuple[CentroidIndex, tuple[TripletIds, ...], np.ndarray]:
    """Assign one centroid per (triplet, role) and gather descriptor rows.

    Roles are numbered query, positive, negative per triplet in order, so
    triplet t owns centroids 3t, 3t+1, 3t+2. A first-image-only query
    contributes exactly one image to its centroid.
    """
    triplets = tuple(triplets)
    if not triplets:
        raise ValueError("cannot index an empty batch")
    ids: list[int] = []
    rows: list[int] = []
    triplet_ids = []
    for t_i, t in enumerate(triplets):
        base = 3 * t_i
        for role_i, role_rows in enumerate(
            (t.query_rows, t.positive.image_refs, t.negative.image_refs)
        ):
            ids.extend([base + role_i] * len(role_rows))
            rows.extend(role_rows)
        triplet_ids.append(TripletIds(anchor=base, positive=base + 1, negative=base + 2))
    index = CentroidIndex(ids=np.asarray(ids, dtype=np.int64), n_centroids=3 * len(triplets))
    return index, tuple(triplet_ids), np.asarray(rows, dtype=np.int64)


def plan_epoch(
    gallery,
    picks,
    rng: np.random.Generator,
    budget: int,
    n_workers: int,
    single_query_prob: float = 0.5,
) -> EpochPlan:
    """Generate, pack and partition one epoch's triplets."""
    triplets = generate_triplets(gallery, picks, rng, single_query_prob)
    batches = pack_batches(triplets, budget)
    return EpochPlan(
        batches=tuple(batches),
        worker_of=partition_batches(len(batches), n_workers),
        n_workers=n_workers,
    )
