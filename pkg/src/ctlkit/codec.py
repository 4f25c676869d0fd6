"""On-disk data model: descriptor files, manifests, RLE masks, detection records.

File formats
------------
Descriptor file (binary, little-endian):
    magic ``CTLD`` | u32 version=1 | u32 count | u32 dim | count*dim float32

Manifest (JSON): top-level keys ``gallery`` (array of
``{object_id, descriptor_file, rows}``) and ``picks`` (array of
``{pick_id, descriptor_file, rows, gt_object_id?}``). ``descriptor_file``
paths are resolved relative to the manifest's directory. Either key may be
absent or empty so gallery-only and picks-only manifests are valid.

Detections file (JSON): array of records
``{image_id, label, score, bbox: [x, y, w, h], mask: {width, height, rle}}``.

Masks are run-length encoded in row-major scan order, runs alternating
background/foreground starting with background (the leading background run
may be 0). Bounding boxes are ``(x, y, w, h)`` with x, y the top-left pixel
and w, h inclusive pixel counts.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DESCRIPTOR_MAGIC = b"CTLD"
DESCRIPTOR_VERSION = 1
_HEADER = struct.Struct("<4sIII")  # magic, version, count, dim


@dataclass(frozen=True)
class DescriptorMatrix:
    """A count x dim matrix of real-valued descriptors, row-major."""

    data: np.ndarray  # (count, dim) float32

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float32)
        if a.ndim != 2:
            raise ValueError(f"descriptor data must be 2-D, got shape {a.shape}")
        if a.shape[1] < 1:
            raise ValueError("descriptor dim must be >= 1")
        if not np.all(np.isfinite(a)):
            raise ValueError("descriptor data contains non-finite values")
        object.__setattr__(self, "data", a)

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class ObjectRecord:
    """One object identity and the descriptor rows of its images.

    Row order is preserved; the first row is the object's first image.
    """

    object_id: str
    image_refs: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "image_refs", tuple(int(i) for i in self.image_refs))
        if not self.image_refs:
            raise ValueError(f"object {self.object_id!r} has an empty image list")
        if any(i < 0 for i in self.image_refs):
            raise ValueError(f"object {self.object_id!r} has a negative image ref")


@dataclass(frozen=True)
class PickRecord:
    """A query scene: the object to identify, optionally with its true identity."""

    pick_id: str
    query_object: ObjectRecord
    gt_object_id: str | None = None  # absent for distractor picks


@dataclass(frozen=True)
class SegmentMask:
    """Binary mask stored as row-major RLE, first run background."""

    width: int
    height: int
    rle: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "rle", tuple(int(r) for r in self.rle))
        if self.width < 1 or self.height < 1:
            raise ValueError("mask dimensions must be positive")
        if any(r < 0 for r in self.rle):
            raise ValueError("RLE runs must be nonnegative")
        if sum(self.rle) != self.width * self.height:
            raise ValueError(
                f"RLE runs sum to {sum(self.rle)}, expected {self.width * self.height}"
            )
        for i in range(1, len(self.rle)):
            if self.rle[i] == 0 and self.rle[i - 1] == 0:
                raise ValueError("RLE has consecutive zero runs")

    @classmethod
    def from_array(cls, bitmap: np.ndarray) -> "SegmentMask":
        """Encode a 2-D boolean array (rows y, cols x) into canonical RLE."""
        a = np.asarray(bitmap, dtype=bool)
        if a.ndim != 2:
            raise ValueError("bitmap must be 2-D")
        flat = a.ravel()
        if flat.size == 0:
            raise ValueError("bitmap must be nonempty")
        change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
        starts = np.concatenate(([0], change))
        ends = np.concatenate((change, [flat.size]))
        runs = (ends - starts).tolist()
        if flat[0]:  # canonical form starts with a background run
            runs.insert(0, 0)
        return cls(width=a.shape[1], height=a.shape[0], rle=tuple(runs))

    def to_array(self) -> np.ndarray:
        """Decode to a (height, width) boolean array."""
        values = np.arange(len(self.rle)) % 2 == 1
        flat = np.repeat(values, np.asarray(self.rle, dtype=np.int64))
        return flat.reshape(self.height, self.width)

    def area(self) -> int:
        """Foreground pixel count."""
        return int(sum(self.rle[1::2]))


def mask_to_bbox(mask: SegmentMask) -> tuple[int, int, int, int]:
    """Tight axis-aligned bounds (x, y, w, h) of the mask's foreground.

    Raises ValueError on an all-background mask.
    """
    a = mask.to_array()
    ys, xs = np.nonzero(a)
    if ys.size == 0:
        raise ValueError("mask has no foreground pixels")
    x0, x1 = int(xs.min()), int(xs.max())
    y0, y1 = int(ys.min()), int(ys.max())
    return (x0, y0, x1 - x0 + 1, y1 - y0 + 1)


@dataclass(frozen=True)
class DetectionRecord:
    """A labeled segment with its matching score, mask and tight bbox."""

    image_id: str
    label: str
    score: float
    bbox: tuple[float, float, float, float]
    mask: SegmentMask

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError("detection score must be finite")
        object.__setattr__(self, "bbox", tuple(self.bbox))
        if tuple(self.bbox) != mask_to_bbox(self.mask):
            raise ValueError(
                f"bbox {self.bbox} is not the tight bbox of the mask "
                f"({mask_to_bbox(self.mask)})"
            )

    @classmethod
    def from_mask(cls, image_id: str, label: str, score: float, mask: SegmentMask):
        return cls(image_id, label, score, mask_to_bbox(mask), mask)


def write_descriptor_file(matrix: DescriptorMatrix, path: str | Path) -> None:
    """Write a descriptor matrix; round-trips bit-identically via read."""
    a = matrix.data
    payload = a.astype("<f4", copy=False).tobytes(order="C")
    header = _HEADER.pack(DESCRIPTOR_MAGIC, DESCRIPTOR_VERSION, a.shape[0], a.shape[1])
    Path(path).write_bytes(header + payload)


def read_descriptor_file(path: str | Path) -> DescriptorMatrix:
    """Read a descriptor file, validating header, length and finiteness."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: file shorter than descriptor header")
    magic, version, count, dim = _HEADER.unpack_from(raw)
    if magic != DESCRIPTOR_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != DESCRIPTOR_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if dim < 1:
        raise ValueError(f"{path}: dim must be positive")
    expected = count * dim * 4
    payload = raw[_HEADER.size:]
    if len(payload) < expected:
        raise ValueError(
            f"{path}: truncated payload ({len(payload)} bytes, expected {expected})"
        )
    if len(payload) > expected:
        raise ValueError(f"{path}: trailing bytes after payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(count, dim)
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{path}: payload contains non-finite values")
    return DescriptorMatrix(data=data.copy())


@dataclass(frozen=True)
class LoadedManifest:
    """Manifest contents with all referenced descriptor files concatenated.

    ``image_refs`` in the returned records index into ``descriptors``.
    """

    descriptors: DescriptorMatrix
    gallery: tuple[ObjectRecord, ...] = field(default_factory=tuple)
    picks: tuple[PickRecord, ...] = field(default_factory=tuple)


def load_manifest(path: str | Path) -> LoadedManifest:
    """Load a manifest and resolve every image ref against its descriptor file.

    Validates: no duplicate object_id / pick_id, nonempty row lists, row
    indices in range. When the manifest carries a gallery section, pick
    ``gt_object_id`` values must name one of its objects; picks-only
    manifests defer that check to whichever operation joins them with a
    gallery.
    """
    path = Path(path)
    doc = json.loads(path.read_text())
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: manifest must be a JSON object")

    matrices: dict[str, DescriptorMatrix] = {}
    offsets: dict[str, int] = {}
    total = 0
    dim: int | None = None

    def resolve(descriptor_file: str, rows: list, who: str) -> tuple[int, ...]:
        nonlocal total, dim
        if not rows:
            raise ValueError(f"{path}: {who} has an empty row list")
        if descriptor_file not in matrices:
            m = read_descriptor_file(path.parent / descriptor_file)
            if dim is None:
                dim = m.dim
            elif m.dim != dim:
                raise ValueError(
                    f"{path}: descriptor dim mismatch ({m.dim} vs {dim})"
                )
            matrices[descriptor_file] = m
            offsets[descriptor_file] = total
            total += m.count
        m = matrices[descriptor_file]
        off = offsets[descriptor_file]
        for r in rows:
            if not 0 <= int(r) < m.count:
                raise ValueError(
                    f"{path}: {who} references row {r} outside {descriptor_file} "
                    f"(count={m.count})"
                )
        return tuple(off + int(r) for r in rows)

    gallery = []
    seen_ids = set()
    for entry in doc.get("gallery", []):
        oid = entry["object_id"]
        if oid in seen_ids:
            raise ValueError(f"{path}: duplicate object_id {oid!r}")
        seen_ids.add(oid)
        refs = resolve(entry["descriptor_file"], entry["rows"], f"object {oid!r}")
        gallery.append(ObjectRecord(object_id=oid, image_refs=refs))

    picks = []
    seen_picks = set()
    for entry in doc.get("picks", []):
        pid = entry["pick_id"]
        if pid in seen_picks:
            raise ValueError(f"{path}: duplicate pick_id {pid!r}")
        seen_picks.add(pid)
        refs = resolve(entry["descriptor_file"], entry["rows"], f"pick {pid!r}")
        gt = entry.get("gt_object_id")
        if gt is not None and gallery and gt not in seen_ids:
            raise ValueError(f"{path}: pick {pid!r} references unknown object {gt!r}")
        picks.append(
            PickRecord(pick_id=pid, query_object=ObjectRecord(pid, refs), gt_object_id=gt)
        )

    if total == 0:
        descriptors = DescriptorMatrix(np.zeros((0, 1), dtype=np.float32))
    else:
        descriptors = DescriptorMatrix(
            np.concatenate([m.data for m in matrices.values()], axis=0)
        )
    return LoadedManifest(descriptors=descriptors, gallery=tuple(gallery), picks=tuple(picks))


@dataclass(frozen=True)
class IdentificationData:
    """A gallery and a pick set sharing one descriptor matrix."""

    descriptors: np.ndarray  # (N, D) float64
    gallery: tuple[ObjectRecord, ...]
    picks: tuple[PickRecord, ...]


def load_identification_data(
    gallery_manifest: str | Path, picks_manifest: str | Path | None = None
) -> IdentificationData:
    """Join a gallery manifest with a picks manifest (possibly the same file).

    Pick image refs are re-based onto the concatenated descriptor matrix and
    every labeled pick is checked against the gallery's object ids.
    """
    gal = load_manifest(gallery_manifest)
    if not gal.gallery:
        raise ValueError(f"{gallery_manifest}: manifest has no gallery objects")
    if picks_manifest is None or Path(picks_manifest) == Path(gallery_manifest):
        descriptors = gal.descriptors.data.astype(np.float64)
        picks = gal.picks
    else:
        pk = load_manifest(picks_manifest)
        offset = gal.descriptors.count
        if pk.descriptors.count and gal.descriptors.count:
            if pk.descriptors.dim != gal.descriptors.dim:
                raise ValueError("gallery and picks descriptor dims differ")
        descriptors = np.concatenate(
            [gal.descriptors.data, pk.descriptors.data], axis=0
        ).astype(np.float64)
        picks = tuple(
            PickRecord(
                pick_id=p.pick_id,
                query_object=ObjectRecord(
                    p.query_object.object_id,
                    tuple(r + offset for r in p.query_object.image_refs),
                ),
                gt_object_id=p.gt_object_id,
            )
            for p in pk.picks
        )
    known = {o.object_id for o in gal.gallery}
    for p in picks:
        if p.gt_object_id is not None and p.gt_object_id not in known:
            raise ValueError(
                f"pick {p.pick_id!r} references unknown object {p.gt_object_id!r}"
            )
    return IdentificationData(descriptors=descriptors, gallery=gal.gallery, picks=picks)


def round_floats(obj, sig: int = 9):
    """Round every float in a JSON-ready structure to `sig` significant digits."""
    if isinstance(obj, float):
        return float(f"{obj:.{sig}g}")
    if isinstance(obj, dict):
        return {k: round_floats(v, sig) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round_floats(v, sig) for v in obj]
    return obj


def dump_json(obj, path: str | Path) -> None:
    """Serialize with sorted keys and 9-significant-digit floats.

    Output bytes are a pure function of `obj`, which makes run-to-run
    reproducibility testable at the file level.
    """
    text = json.dumps(round_floats(obj), sort_keys=True, indent=1)
    Path(path).write_text(text + "\n")


def detection_to_json(det: DetectionRecord) -> dict:
    return {
        "image_id": det.image_id,
        "label": det.label,
        "score": det.score,
        "bbox": list(det.bbox),
        "mask": {"width": det.mask.width, "height": det.mask.height, "rle": list(det.mask.rle)},
    }


def detection_from_json(doc: dict) -> DetectionRecord:
    mask = SegmentMask(
        width=int(doc["mask"]["width"]),
        height=int(doc["mask"]["height"]),
        rle=tuple(doc["mask"]["rle"]),
    )
    return DetectionRecord(
        image_id=doc["image_id"],
        label=doc["label"],
        score=float(doc["score"]),
        bbox=tuple(doc["bbox"]),
        mask=mask,
    )


def write_detections(dets: list[DetectionRecord], path: str | Path) -> None:
    dump_json([detection_to_json(d) for d in dets], path)


def read_detections(path: str | Path) -> list[DetectionRecord]:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, list):
        raise ValueError(f"{path}: detections file must be a JSON array")
    return [detection_from_json(d) for d in doc]
