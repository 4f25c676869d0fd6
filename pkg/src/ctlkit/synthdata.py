"""Deterministic synthetic datasets for identification and detection.

Objects are modeled as a set of unit-norm anchor descriptors, one per
"face" (views of one object that look nothing alike, yet belong together).
Every gallery or query view is a face anchor plus Gaussian noise, so a
nearest-anchor classifier upper-bounds what any trained encoder can reach
and the task is learnable by construction. Anchors are rejection-sampled on
the unit sphere until all pairwise cosines stay below a separation bound.

Detection scenes place a few gallery objects as rectangles on a square
canvas. Clean scenes have one well-described candidate segment per object.
Cluttered scenes add duplicate candidates, merged-pair candidates (the
average of two objects' views over the union of their masks) and background
candidates whose descriptors are kept dissimilar to every gallery object,
which is what the score threshold is there to reject.

Everything is a pure function of the spec: identical specs produce
byte-identical files. Streams are split per purpose so the gallery, the
picks and each scene kind can be regenerated independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import (
    DescriptorMatrix,
    DetectionRecord,
    SegmentMask,
    dump_json,
    write_descriptor_file,
    write_detections,
)

ANCHOR_COS_BOUND = 0.5
BACKGROUND_COS_BOUND = 0.45
_STREAM_ANCHORS = 0
_STREAM_IDENT = 1
_STREAM_SCENE_CLEAN = 2
_STREAM_SCENE_CLUTTERED = 3


@dataclass(frozen=True)
class SynthSpec:
    """Knobs of the synthetic task; see module docstring."""

    n_objects: int = 50
    n_faces: int = 2
    dim: int = 32
    gallery_views: int = 5
    query_views: int = 3
    n_picks: int = 200
    noise_sigma: float = 0.1
    distractor_fraction: float = 0.0
    seed: int = 0
    scene_images: int = 4
    scene_objects: int = 4
    scene_size: int = 256

    def __post_init__(self):
        counts = (
            self.n_objects, self.n_faces, self.dim, self.gallery_views,
            self.query_views, self.n_picks, self.scene_images,
            self.scene_objects, self.scene_size,
        )
        if any(c < 1 for c in counts):
            raise ValueError("all spec counts must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        if not 0.0 <= self.distractor_fraction <= 1.0:
            raise ValueError("distractor fraction must be in [0, 1]")
        if self.scene_objects > self.n_objects:
            raise ValueError("scene cannot contain more objects than the gallery")


def _rng(spec: SynthSpec, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((spec.seed, stream)))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _sample_separated(
    rng: np.random.Generator,
    n: int,
    dim: int,
    existing: list[np.ndarray],
    bound: float,
    max_tries: int = 1000,
) -> list[np.ndarray]:
    """Unit vectors with pairwise cosine below `bound` against all others."""
    out: list[np.ndarray] = []
    pool = list(existing)
    for _ in range(n):
        for _ in range(max_tries):
            v = _unit(rng.standard_normal(dim))
            if all(float(np.dot(v, u)) < bound for u in pool):
                out.append(v)
                pool.append(v)
                break
        else:
            raise ValueError(
                f"could not place {n} anchors with cosine < {bound} in dim {dim}; "
                "increase the descriptor dim or lower the object count"
            )
    return out


def anchor_matrix(spec: SynthSpec) -> np.ndarray:
    """The (n_objects, n_faces, dim) gallery anchors for this spec."""
    rng = _rng(spec, _STREAM_ANCHORS)
    flat = _sample_separated(rng, spec.n_objects * spec.n_faces, spec.dim, [], ANCHOR_COS_BOUND)
    return np.stack(flat).reshape(spec.n_objects, spec.n_faces, spec.dim)


def object_id(i: int) -> str:
    return f"obj_{i:03d}"


def gen_identification_dataset(spec: SynthSpec, out_dir: str | Path) -> dict[str, Path]:
    """Write gallery + picks manifests and their descriptor files.

    Gallery views cycle through the object's faces so every face is covered;
    query views pick a random face each. The trailing ``distractor_fraction``
    of picks get fresh anchors absent from the gallery and no gt_object_id.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    anchors = anchor_matrix(spec)
    rng = _rng(spec, _STREAM_IDENT)

    gallery_rows = []
    gallery_entries = []
    for i in range(spec.n_objects):
        start = len(gallery_rows)
        for v in range(spec.gallery_views):
            face = anchors[i, v % spec.n_faces]
            gallery_rows.append(face + spec.noise_sigma * rng.standard_normal(spec.dim))
        gallery_entries.append(
            {
                "object_id": object_id(i),
                "descriptor_file": "gallery.ctld",
                "rows": list(range(start, start + spec.gallery_views)),
            }
        )

    n_distractors = int(round(spec.distractor_fraction * spec.n_picks))
    n_labeled = spec.n_picks - n_distractors
    all_anchors = [anchors[i, f] for i in range(spec.n_objects) for f in range(spec.n_faces)]
    distractor_anchors = _sample_separated(
        rng, n_distractors, spec.dim, all_anchors, ANCHOR_COS_BOUND
    )

    pick_rows = []
    pick_entries = []
    for j in range(spec.n_picks):
        start = len(pick_rows)
        if j < n_labeled:
            obj = j % spec.n_objects
            entry = {
                "pick_id": f"pick_{j:04d}",
                "descriptor_file": "picks.ctld",
                "rows": list(range(start, start + spec.query_views)),
                "gt_object_id": object_id(obj),
            }
            source = anchors[obj]
        else:
            entry = {
                "pick_id": f"pick_{j:04d}",
                "descriptor_file": "picks.ctld",
                "rows": list(range(start, start + spec.query_views)),
            }
            source = distractor_anchors[j - n_labeled][None, :]
        for _ in range(spec.query_views):
            face = source[int(rng.integers(len(source)))]
            pick_rows.append(face + spec.noise_sigma * rng.standard_normal(spec.dim))
        pick_entries.append(entry)

    write_descriptor_file(
        DescriptorMatrix(np.asarray(gallery_rows, dtype=np.float32)),
        out_dir / "gallery.ctld",
    )
    write_descriptor_file(
        DescriptorMatrix(np.asarray(pick_rows, dtype=np.float32)),
        out_dir / "picks.ctld",
    )
    gallery_manifest = out_dir / "gallery.json"
    picks_manifest = out_dir / "picks.json"
    dump_json({"gallery": gallery_entries, "picks": []}, gallery_manifest)
    dump_json({"gallery": [], "picks": pick_entries}, picks_manifest)
    return {"gallery_manifest": gallery_manifest, "picks_manifest": picks_manifest}


def _grid_rect(
    rng: np.random.Generator, cell: int, col: int, row: int
) -> tuple[int, int, int, int]:
    """A rectangle inside one grid cell, leaving a small margin."""
    max_side = cell - 8
    w = int(rng.integers(cell // 4, max_side + 1))
    h = int(rng.integers(cell // 4, max_side + 1))
    x = col * cell + int(rng.integers(0, cell - w + 1))
    y = row * cell + int(rng.integers(0, cell - h + 1))
    return x, y, w, h


def _rect_mask(size: int, rect: tuple[int, int, int, int]) -> SegmentMask:
    x, y, w, h = rect
    a = np.zeros((size, size), dtype=bool)
    a[y : y + h, x : x + w] = True
    return SegmentMask.from_array(a)


def gen_detection_scene(
    spec: SynthSpec, out_dir: str | Path, cluttered: bool
) -> dict[str, Path]:
    """Write a scene manifest plus its ground-truth detections file."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    anchors = anchor_matrix(spec)
    rng = _rng(spec, _STREAM_SCENE_CLUTTERED if cluttered else _STREAM_SCENE_CLEAN)
    kind = "cluttered" if cluttered else "clean"
    desc_name = f"scene_{kind}.ctld"

    grid = math.ceil(math.sqrt(spec.scene_objects))
    cell = spec.scene_size // grid
    if cell < 16:
        raise ValueError("scene size too small for the object count")

    object_means = anchors.mean(axis=1)  # rough per-object direction
    gallery_dirs = [anchors[i, f] for i in range(spec.n_objects) for f in range(spec.n_faces)]
    gallery_dirs += [ _unit(m) for m in object_means ]

    def noisy_view(obj: int) -> np.ndarray:
        face = int(rng.integers(spec.n_faces))
        return anchors[obj, face] + spec.noise_sigma * rng.standard_normal(spec.dim)

    def background_vec() -> np.ndarray:
        for _ in range(1000):
            v = _unit(rng.standard_normal(spec.dim))
            if all(float(np.dot(v, u)) < BACKGROUND_COS_BOUND for u in gallery_dirs):
                return v
        raise ValueError("could not sample a background descriptor far from the gallery")

    rows: list[np.ndarray] = []
    scene_doc = []
    gt: list[DetectionRecord] = []

    def add_candidate(segments: list, mask: SegmentMask, vec: np.ndarray) -> None:
        segments.append(
            {
                "mask_rle": list(mask.rle),
                "width": mask.width,
                "height": mask.height,
                "descriptor_file": desc_name,
                "rows": [len(rows)],
            }
        )
        rows.append(vec)

    for k in range(spec.scene_images):
        image_id = f"img_{k:02d}"
        present = rng.choice(spec.n_objects, size=spec.scene_objects, replace=False)
        rects = []
        segments: list = []
        for slot, obj in enumerate(present):
            rect = _grid_rect(rng, cell, slot % grid, slot // grid)
            rects.append(rect)
            mask = _rect_mask(spec.scene_size, rect)
            gt.append(
                DetectionRecord.from_mask(
                    image_id=image_id, label=object_id(int(obj)), score=1.0, mask=mask
                )
            )
            add_candidate(segments, mask, noisy_view(int(obj)))
        if cluttered:
            # a duplicate proposal of the first object, shifted but overlapping
            x, y, w, h = rects[0]
            dx, dy = max(1, w // 3), max(1, h // 3)
            dup = (min(x + dx, spec.scene_size - w), min(y + dy, spec.scene_size - h), w, h)
            add_candidate(segments, _rect_mask(spec.scene_size, dup), noisy_view(int(present[0])))
            # an undersegmented proposal spanning two objects
            if len(present) >= 2:
                merged = _rect_mask(spec.scene_size, rects[0]).to_array() | _rect_mask(
                    spec.scene_size, rects[1]
                ).to_array()
                vec = 0.5 * (noisy_view(int(present[0])) + noisy_view(int(present[1])))
                add_candidate(segments, SegmentMask.from_array(merged), vec)
            # background proposals that should match nothing
            for _ in range(2):
                rect = _grid_rect(rng, cell, int(rng.integers(grid)), int(rng.integers(grid)))
                add_candidate(segments, _rect_mask(spec.scene_size, rect), background_vec())
        scene_doc.append({"image_id": image_id, "segments": segments})

    write_descriptor_file(
        DescriptorMatrix(np.asarray(rows, dtype=np.float32)), out_dir / desc_name
    )
    scene_manifest = out_dir / f"scene_{kind}.json"
    gt_path = out_dir / f"gt_{kind}.json"
    dump_json(scene_doc, scene_manifest)
    write_detections(gt, gt_path)
    return {"scene_manifest": scene_manifest, "gt_detections": gt_path}
