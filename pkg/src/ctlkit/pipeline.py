"""Unseen-object detection downstream of segmentation.

Candidate segments (mask + descriptor rows, produced by some upstream
segmenter) are identified against the gallery, rejected when their best
match scores below theta, and assembled into a coherent instance
segmentation: where surviving masks overlap, the pixel goes to the segment
with the higher match score (ties to the earlier segment in input order).
Segments reduced below ``min_area`` surviving pixels are dropped and the
remaining ones are re-boxed tightly.

Scene manifest (JSON): array of images,
``{image_id, segments: [{mask_rle, width, height, descriptor_file, rows}]}``
with descriptor paths relative to the manifest. The output is a detections
file as written by :mod:`ctlkit.codec`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import encode
from .codec import (
    DetectionRecord,
    SegmentMask,
    load_manifest,
    read_descriptor_file,
)
from .matcher import GalleryIndex, IndexMode, build_gallery_index, match_queries


@dataclass(frozen=True)
class CandidateSegment:
    """A segment proposal: mask plus one or more descriptor rows."""

    image_id: str
    mask: SegmentMask
    descriptors: np.ndarray  # (n_rows, D)

    def __post_init__(self):
        d = np.asarray(self.descriptors, dtype=np.float64)
        if d.ndim != 2 or d.shape[0] < 1:
            raise ValueError("segment needs at least one descriptor row")
        if not np.all(np.isfinite(d)):
            raise ValueError("segment descriptors must be finite")
        if self.mask.area() == 0:
            raise ValueError("segment mask has no foreground")
        object.__setattr__(self, "descriptors", d)


@dataclass(frozen=True)
class LabeledSegment:
    """A candidate that survived identification."""

    segment: CandidateSegment
    object_id: str
    score: float


def filter_segments(
    segments, index: GalleryIndex, theta: float, encoder=None
) -> list[LabeledSegment]:
    """Identify each segment (k=1) and keep those accepted at theta."""
    segments = list(segments)
    if not segments:
        return []
    queries = []
    for i, seg in enumerate(segments):
        rows = seg.descriptors if encoder is None else encode(encoder, seg.descriptors)
        queries.append((str(i), rows))
    results = match_queries(index, queries, k=1, theta=theta)
    kept = []
    for seg, res in zip(segments, results):
        if res.accepted:
            oid, score = res.ranked[0]
            kept.append(LabeledSegment(segment=seg, object_id=oid, score=score))
    return kept


def assemble_instance_map(
    labeled, width: int, height: int, min_area: int = 1
) -> tuple[np.ndarray, list[DetectionRecord]]:
    """Resolve overlaps by score priority and rebuild tight detections.

    Returns the label map (height x width, -1 background, else index into
    the returned detection list) and the surviving detections in input
    order.
    """
    labeled = list(labeled)
    for ls in labeled:
        m = ls.segment.mask
        if (m.width, m.height) != (width, height):
            raise ValueError(
                f"segment mask is {m.width}x{m.height}, scene is {width}x{height}"
            )
    # higher score paints first; ties keep input order
    priority = sorted(range(len(labeled)), key=lambda i: (-labeled[i].score, i))
    claimed = np.zeros((height, width), dtype=bool)
    surviving: list[tuple[int, np.ndarray]] = []
    for i in priority:
        fg = labeled[i].segment.mask.to_array() & ~claimed
        if int(fg.sum()) >= min_area:
            claimed |= fg
            surviving.append((i, fg))
    surviving.sort(key=lambda pair: pair[0])  # back to input order

    label_map = np.full((height, width), -1, dtype=np.int64)
    records = []
    for out_idx, (i, fg) in enumerate(surviving):
        label_map[fg] = out_idx
        ls = labeled[i]
        records.append(
            DetectionRecord.from_mask(
                image_id=ls.segment.image_id,
                label=ls.object_id,
                score=ls.score,
                mask=SegmentMask.from_array(fg),
            )
        )
    return label_map, records


@dataclass(frozen=True)
class SceneImage:
    image_id: str
    width: int
    height: int
    segments: tuple[CandidateSegment, ...]


def load_scene_manifest(path: str | Path) -> list[SceneImage]:
    """Load candidate segments and their descriptors for every scene image."""
    path = Path(path)
    doc = json.loads(path.read_text())
    if not isinstance(doc, list):
        raise ValueError(f"{path}: scene manifest must be a JSON array")
    matrices: dict[str, np.ndarray] = {}
    images = []
    for entry in doc:
        image_id = entry["image_id"]
        segs = []
        dims = None
        for seg in entry["segments"]:
            mask = SegmentMask(
                width=int(seg["width"]), height=int(seg["height"]), rle=tuple(seg["mask_rle"])
            )
            if dims is None:
                dims = (mask.width, mask.height)
            elif (mask.width, mask.height) != dims:
                raise ValueError(f"{path}: segment masks of {image_id!r} differ in size")
            f = seg["descriptor_file"]
            if f not in matrices:
                matrices[f] = read_descriptor_file(path.parent / f).data
            rows = matrices[f][list(seg["rows"])]
            segs.append(CandidateSegment(image_id=image_id, mask=mask, descriptors=rows))
        if dims is None:
            raise ValueError(f"{path}: image {image_id!r} has no segments")
        images.append(
            SceneImage(image_id=image_id, width=dims[0], height=dims[1], segments=tuple(segs))
        )
    return images


def detect_image(
    scene: SceneImage,
    index: GalleryIndex,
    theta: float,
    encoder=None,
    min_area: int = 1,
    resolve_overlaps: bool = True,
) -> list[DetectionRecord]:
    """Filter and (optionally) assemble one scene image into detections."""
    kept = filter_segments(scene.segments, index, theta, encoder=encoder)
    if not resolve_overlaps:
        return [
            DetectionRecord.from_mask(
                image_id=ls.segment.image_id,
                label=ls.object_id,
                score=ls.score,
                mask=ls.segment.mask,
            )
            for ls in kept
        ]
    _, records = assemble_instance_map(kept, scene.width, scene.height, min_area=min_area)
    return records


def run_detection(
    scene_manifest: str | Path,
    gallery_manifest: str | Path,
    encoder,
    theta: float,
    mode: IndexMode = IndexMode.INSTANCE,
    min_area: int = 1,
    resolve_overlaps: bool = True,
    jobs: int = 1,
) -> list[DetectionRecord]:
    """Full pipeline: identify each candidate segment, reject below theta,
    assemble per-image instance maps, return all surviving detections."""
    gal = load_manifest(gallery_manifest)
    if not gal.gallery:
        raise ValueError(f"{gallery_manifest}: manifest has no gallery objects")
    gal_rows = gal.descriptors.data.astype(np.float64)
    embedded = gal_rows if encoder is None else encode(encoder, gal_rows)
    index = build_gallery_index(gal.gallery, embedded, mode)
    scenes = load_scene_manifest(scene_manifest)

    def one(scene: SceneImage) -> list[DetectionRecord]:
        return detect_image(
            scene, index, theta, encoder=encoder, min_area=min_area,
            resolve_overlaps=resolve_overlaps,
        )

    if jobs > 1 and len(scenes) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_scene = list(pool.map(one, scenes))
    else:
        per_scene = [one(s) for s in scenes]
    return [det for dets in per_scene for det in dets]
