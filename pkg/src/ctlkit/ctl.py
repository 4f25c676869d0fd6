"""Centroid aggregation and the centroid triplet loss with exact gradients.

Embeddings of all images in a batch are aggregated to per-object centroids
with an index-add: each image carries a centroid id, rows with the same id
are summed and divided by the member count. The loss on a triplet of
centroids (anchor Ca, positive Cp, negative Cn) is the hinge

    max(||Ca - Cp|| - ||Ca - Cn|| + margin, 0)

whose subgradient is taken as zero everywhere the hinge is inactive,
including exactly at the kink. Coincident centroids (distance below 1e-12)
contribute a zero unit vector instead of NaN.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

NORM_EPS = 1e-12


@dataclass(frozen=True)
class CentroidIndex:
    """Per-image centroid ids plus member counts for an index-add mean."""

    ids: np.ndarray  # (n_images,) int64, values in [0, n_centroids)
    n_centroids: int
    counts: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        object.__setattr__(self, "ids", ids)
        if self.n_centroids < 1:
            raise ValueError("need at least one centroid")
        if ids.ndim != 1:
            raise ValueError("centroid ids must be a 1-D array")
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_centroids):
            raise ValueError("centroid id out of range")
        counts = np.bincount(ids, minlength=self.n_centroids)
        if np.any(counts == 0):
            raise ValueError("every centroid must have at least one member")
        object.__setattr__(self, "counts", counts)


@dataclass(frozen=True)
class TripletIds:
    """Centroid ids of one (anchor, positive, negative) triplet."""

    anchor: int
    positive: int
    negative: int

    def __post_init__(self):
        if self.anchor == self.negative or self.positive == self.negative:
            raise ValueError("negative centroid must differ from anchor and positive")


class QueryRep(Enum):
    """How a query object is represented in a training triplet."""

    ALL_IMAGES = "all_images"
    FIRST_IMAGE_ONLY = "first_image_only"


def compute_centroids(embeddings: np.ndarray, index: CentroidIndex) -> np.ndarray:
    """Mean embedding per centroid via index-add, summed in ascending row order."""
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] != index.ids.size:
        raise ValueError(
            f"embeddings shape {e.shape} incompatible with {index.ids.size} centroid ids"
        )
    sums = np.zeros((index.n_centroids, e.shape[1]))
    np.add.at(sums, index.ids, e)
    return sums / index.counts[:, None]


def ctl_forward(ca: np.ndarray, cp: np.ndarray, cn: np.ndarray, margin: float) -> float:
    """Hinge triplet loss on three centroids."""
    ca, cp, cn = (np.asarray(v, dtype=np.float64) for v in (ca, cp, cn))
    if not (ca.shape == cp.shape == cn.shape):
        raise ValueError("centroid dims differ")
    d_pos = float(np.linalg.norm(ca - cp))
    d_neg = float(np.linalg.norm(ca - cn))
    return max(d_pos - d_neg + margin, 0.0)


def ctl_backward(
    ca: np.ndarray, cp: np.ndarray, cn: np.ndarray, margin: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Subgradients of ctl_forward w.r.t. (Ca, Cp, Cn); all zero when inactive."""
    ca, cp, cn = (np.asarray(v, dtype=np.float64) for v in (ca, cp, cn))
    if not (ca.shape == cp.shape == cn.shape):
        raise ValueError("centroid dims differ")
    ap = ca - cp
    an = ca - cn
    d_pos = np.linalg.norm(ap)
    d_neg = np.linalg.norm(an)
    if d_pos - d_neg + margin <= 0.0:
        z = np.zeros_like(ca)
        return z, z.copy(), z.copy()
    u = ap / d_pos if d_pos >= NORM_EPS else np.zeros_like(ap)
    v = an / d_neg if d_neg >= NORM_EPS else np.zeros_like(an)
    return u - v, -u, v


def scatter_centroid_grads(
    centroid_grads: np.ndarray, index: CentroidIndex
) -> np.ndarray:
    """Chain rule through the mean: row j gets grads[id(j)] / count(id(j))."""
    g = np.asarray(centroid_grads, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != index.n_centroids:
        raise ValueError(
            f"centroid grads shape {g.shape} incompatible with {index.n_centroids} centroids"
        )
    return g[index.ids] / index.counts[index.ids][:, None]


def sample_query_representation(
    rng: np.random.Generator, query_image_rows, prob: float
) -> QueryRep:
    """Draw the query representation: first image only with probability `prob`."""
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"prob must be in [0, 1], got {prob}")
    if len(query_image_rows) < 1:
        raise ValueError("query needs at least one image")
    if rng.random() < prob:
        return QueryRep.FIRST_IMAGE_ONLY
    return QueryRep.ALL_IMAGES
