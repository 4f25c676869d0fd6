"""Cosine-similarity matching of query objects against a gallery.

Scores are plain cosine similarity in [-1, 1]; LARGER means MORE similar.
Some retrieval code bases use the cosine distance (1 - cos) instead; this
library never does, and all thresholds assume similarity semantics: a match
is accepted when its best score is at least theta.

The gallery can be indexed in two modes. Centroid mode stores one mean
embedding per object; instance mode stores every image embedding and scores
an object by its closest single image. Queries are always represented by
the centroid of their embedding rows; the mode only changes the gallery
side. Search is exact brute force with a deterministic tie-break by
ascending object id.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .ctl import NORM_EPS, CentroidIndex, compute_centroids


class IndexMode(Enum):
    CENTROID = "centroid"
    INSTANCE = "instance"


@dataclass(frozen=True)
class GalleryIndex:
    """Immutable search structure over gallery embeddings.

    ``entries`` rows are grouped by object in ascending object_id order;
    ``object_slices[i]`` is the (start, stop) row range of ``object_ids[i]``.
    Rows are stored unit-normalized so scoring is a single matmul.
    """

    mode: IndexMode
    object_ids: tuple[str, ...]
    entries: np.ndarray  # (n_entries, D) float64, unit rows
    object_slices: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class MatchResult:
    query_id: str
    ranked: tuple[tuple[str, float], ...]  # (object_id, score), descending score
    accepted: bool


def cosine_similarity(x: np.ndarray, y: np.ndarray) -> float:
    """x . y / (||x|| ||y||); raises on near-zero-norm input."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"vector shapes differ: {x.shape} vs {y.shape}")
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx < NORM_EPS or ny < NORM_EPS:
        raise ValueError("cosine similarity undefined for near-zero vectors")
    return float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0))


def _unit_rows(rows: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms < NORM_EPS):
        raise ValueError(f"{what} contains a near-zero embedding")
    if not np.all(np.isfinite(rows)):
        raise ValueError(f"{what} contains non-finite embeddings")
    return rows / norms[:, None]


def build_gallery_index(gallery, embeddings: np.ndarray, mode: IndexMode) -> GalleryIndex:
    """Index gallery objects, given the embedding row for every image ref."""
    gallery = sorted(gallery, key=lambda o: o.object_id)
    if not gallery:
        raise ValueError("gallery is empty")
    e = np.asarray(embeddings, dtype=np.float64)
    if mode is IndexMode.CENTROID:
        rows = np.concatenate([e[list(o.image_refs)] for o in gallery], axis=0)
        ids = np.concatenate(
            [np.full(len(o.image_refs), i) for i, o in enumerate(gallery)]
        )
        index = CentroidIndex(ids=ids, n_centroids=len(gallery))
        entries = compute_centroids(rows, index)
        slices = tuple((i, i + 1) for i in range(len(gallery)))
    elif mode is IndexMode.INSTANCE:
        entries = np.concatenate([e[list(o.image_refs)] for o in gallery], axis=0)
        slices = []
        start = 0
        for o in gallery:
            slices.append((start, start + len(o.image_refs)))
            start += len(o.image_refs)
        slices = tuple(slices)
    else:
        raise ValueError(f"unknown index mode {mode!r}")
    return GalleryIndex(
        mode=mode,
        object_ids=tuple(o.object_id for o in gallery),
        entries=_unit_rows(entries, "gallery index"),
        object_slices=slices,
    )


def query_representative(rows: np.ndarray) -> np.ndarray:
    """Centroid of a query's embedding rows (used in both index modes)."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ValueError("query needs at least one embedding row")
    return rows.mean(axis=0)


def score_objects(index: GalleryIndex, rep: np.ndarray) -> np.ndarray:
    """Per-object similarity of one query representative, object order as indexed."""
    norm = np.linalg.norm(rep)
    if norm < NORM_EPS:
        raise ValueError("query representative has near-zero norm")
    sims = index.entries @ (rep / norm)
    if index.mode is IndexMode.CENTROID:
        scores = sims
    else:
        scores = np.array([sims[a:b].max() for a, b in index.object_slices])
    return np.clip(scores, -1.0, 1.0)


def match_queries(index: GalleryIndex, queries, k: int, theta: float) -> list[MatchResult]:
    """Rank the top-k gallery objects for each (query_id, embedding rows) pair.

    Ties break by ascending object_id. ``accepted`` is whether the best
    score reaches theta; set theta=-1 to disable rejection.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not -1.0 <= theta <= 1.0:
        raise ValueError(f"theta must be in [-1, 1], got {theta}")
    results = []
    for query_id, rows in queries:
        scores = score_objects(index, query_representative(rows))
        # object_ids are stored ascending, so a stable sort on -score ties
        # in favor of the smaller object_id
        order = np.argsort(-scores, kind="stable")[:k]
        ranked = tuple((index.object_ids[i], float(scores[i])) for i in order)
        accepted = bool(ranked and ranked[0][1] >= theta)
        results.append(MatchResult(query_id=query_id, ranked=ranked, accepted=accepted))
    return results


def match_many_to_many(index: GalleryIndex, queries, theta: float) -> list[MatchResult]:
    """Independent per-query argmax with thresholding; queries never compete."""
    return match_queries(index, queries, k=1, theta=theta)
