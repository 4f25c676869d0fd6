"""Retrieval metrics (Recall@k) and COCO-style detection metrics (AP/AR).

The detection evaluator follows the de-facto COCO recipe, pinned here so
results are reproducible and brute-force checkable:

* IoU thresholds 0.50:0.05:0.95 (10 values), on boxes or on masks.
* Greedy matching per image and class: detections in descending score order
  each claim the unmatched ground truth with the highest IoU at or above the
  threshold (ties: lower ground-truth input index). Matching ignores area
  buckets; a detection is assigned to a bucket by its matched ground truth's
  area (mask pixel count).
* AP is the 101-point interpolated average precision, averaged over classes
  and thresholds; AR_d is recall with at most d detections per image and
  class, averaged the same way. AP uses up to 100 detections per image and
  class.
* The class universe is the union of ground-truth and detection labels.
  A class with detections but no ground truth contributes AP cells of 0,
  so false positives for objects that are not in the scene are counted.
  Classes with neither are skipped; recall is only averaged over classes
  with ground truth. Buckets with nothing to average report the sentinel -1.
* Area buckets: medium is [32^2, 96^2) pixels, large is >= 96^2. Smaller
  regions only take part in the unrestricted metrics. Within a bucket,
  detections matched to an out-of-bucket ground truth are dropped from the
  precision-recall sequence; unmatched detections stay false positives.

Every image_id referenced by a detection must appear in the ground truth;
an image with no objects at all cannot be represented.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .backbone import encode
from .codec import DetectionRecord, SegmentMask, load_identification_data
from .matcher import IndexMode, build_gallery_index, match_queries

IOU_THRESHOLDS = tuple(np.arange(0.5, 1.0, 0.05).round(2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AREA_MEDIUM = (32 * 32, 96 * 96)  # [low, high)
MAX_DETS = (1, 10, 100)
AP_MAX_DET = 100


class IouKind(Enum):
    BOX = "box"
    MASK = "mask"


class EvalProtocol(Enum):
    """Single first query image (pre) vs all query images (post)."""

    PRE_PICK = "pre"
    POST_PICK = "post"


@dataclass(frozen=True)
class RetrievalCase:
    pick_id: str
    gt_object_id: str
    ranked_ids: tuple[str, ...]

    def __post_init__(self):
        ranked = tuple(self.ranked_ids)
        if len(set(ranked)) != len(ranked):
            raise ValueError("ranked object ids must be unique")
        object.__setattr__(self, "ranked_ids", ranked)


def recall_at_k(cases, k: int) -> float:
    """Fraction of cases whose true object is in the top k.

    Lists shorter than k count as misses beyond their length.
    """
    cases = list(cases)
    if k < 1:
        raise ValueError("k must be >= 1")
    if not cases:
        raise ValueError("recall over an empty case list is undefined")
    hits = sum(1 for c in cases if c.gt_object_id in c.ranked_ids[:k])
    return hits / len(cases)


def iou_bbox(a, b) -> float:
    """Intersection over union of two (x, y, w, h) boxes; 0 when union is 0."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    if min(aw, ah, bw, bh) < 0:
        raise ValueError("box sides must be nonnegative")
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def iou_mask(a: SegmentMask, b: SegmentMask) -> float:
    """Foreground IoU of two same-size masks; 0 when both are empty."""
    if (a.width, a.height) != (b.width, b.height):
        raise ValueError(
            f"mask dimensions differ: {a.width}x{a.height} vs {b.width}x{b.height}"
        )
    fa, fb = a.to_array(), b.to_array()
    inter = int(np.logical_and(fa, fb).sum())
    union = int(np.logical_or(fa, fb).sum())
    return inter / union if union > 0 else 0.0


@dataclass(frozen=True)
class DetMetrics:
    """COCO-style metric table; -1 marks buckets with nothing to average."""

    ap: float
    ap50: float
    ap75: float
    ap_medium: float
    ap_large: float
    ar_1: float
    ar_10: float
    ar_100: float
    ar_medium: float
    ar_large: float

    def to_dict(self) -> dict[str, float]:
        return {
            "AP": self.ap,
            "AP50": self.ap50,
            "AP75": self.ap75,
            "AP_M": self.ap_medium,
            "AP_L": self.ap_large,
            "AR_1": self.ar_1,
            "AR_10": self.ar_10,
            "AR_100": self.ar_100,
            "AR_M": self.ar_medium,
            "AR_L": self.ar_large,
        }


def _record_area(rec: DetectionRecord) -> int:
    return rec.mask.area()


def _pair_iou(det: DetectionRecord, gt: DetectionRecord, kind: IouKind) -> float:
    if kind is IouKind.BOX:
        return iou_bbox(det.bbox, gt.bbox)
    return iou_mask(det.mask, gt.mask)


def _in_bucket(area: int, bucket: str) -> bool:
    if bucket == "all":
        return True
    if bucket == "medium":
        return AREA_MEDIUM[0] <= area < AREA_MEDIUM[1]
    if bucket == "large":
        return area >= AREA_MEDIUM[1]
    raise ValueError(f"unknown bucket {bucket!r}")


def _average(cells: list[float]) -> float:
    return float(np.mean(cells)) if cells else -1.0


def _interpolated_ap(tp_flags: list[bool], n_gt: int) -> float:
    """101-point interpolated AP of one pooled, score-ordered TP/FP sequence."""
    if n_gt == 0:
        return 0.0  # detections exist but nothing to recall: pure false positives
    if not tp_flags:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum([not f for f in tp_flags])
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # precision envelope, monotone non-increasing from the right
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    inds = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.zeros_like(RECALL_POINTS)
    valid = inds < len(precision)
    q[valid] = precision[inds[valid]]
    return float(q.mean())


def coco_eval(
    detections: list[DetectionRecord],
    ground_truth: list[DetectionRecord],
    iou_kind: IouKind,
) -> DetMetrics:
    """Evaluate detections against ground truth; see module docstring for
    the exact matching and averaging convention."""
    image_ids = sorted({g.image_id for g in ground_truth})
    image_set = set(image_ids)
    for d in detections:
        if d.image_id not in image_set:
            raise ValueError(f"detection references unknown image {d.image_id!r}")

    classes = sorted({g.label for g in ground_truth} | {d.label for d in detections})
    gts_by = {
        (img, c): [g for g in ground_truth if g.image_id == img and g.label == c]
        for img in image_ids
        for c in classes
    }
    dets_by = {}
    for img in image_ids:
        for c in classes:
            ds = [d for d in detections if d.image_id == img and d.label == c]
            order = sorted(range(len(ds)), key=lambda i: (-ds[i].score, i))
            dets_by[(img, c)] = [ds[i] for i in order]

    # IoU tables per (image, class), det rows x gt cols
    iou_tab = {
        key: np.array(
            [[_pair_iou(d, g, iou_kind) for g in gts_by[key]] for d in dets_by[key]]
        ).reshape(len(dets_by[key]), len(gts_by[key]))
        for key in dets_by
    }

    def match(img: str, c: str, thr: float, max_det: int) -> list[tuple[DetectionRecord, DetectionRecord | None]]:
        """Greedy matching; returns (det, matched gt or None) in score order."""
        dets = dets_by[(img, c)][:max_det]
        gts = gts_by[(img, c)]
        ious = iou_tab[(img, c)]
        taken = [False] * len(gts)
        out = []
        for di, det in enumerate(dets):
            best_g, best_iou = -1, thr
            for gi in range(len(gts)):
                if taken[gi]:
                    continue
                if ious[di, gi] >= best_iou and (best_g < 0 or ious[di, gi] > best_iou):
                    best_g, best_iou = gi, ious[di, gi]
            if best_g >= 0:
                taken[best_g] = True
                out.append((det, gts[best_g]))
            else:
                out.append((det, None))
        return out

    ap_cells = {("all", t): [] for t in IOU_THRESHOLDS}
    ap_cells.update({(b, t): [] for b in ("medium", "large") for t in IOU_THRESHOLDS})
    ar_cells = {
        (b, t, d): []
        for b in ("all", "medium", "large")
        for t in IOU_THRESHOLDS
        for d in MAX_DETS
    }

    for c in classes:
        gt_area = {
            b: sum(
                1
                for img in image_ids
                for g in gts_by[(img, c)]
                if _in_bucket(_record_area(g), b)
            )
            for b in ("all", "medium", "large")
        }
        for t in IOU_THRESHOLDS:
            # AP at up to AP_MAX_DET detections per image
            matched = [m for img in image_ids for m in match(img, c, t, AP_MAX_DET)]
            matched.sort(key=lambda pair: -pair[0].score)  # stable: image order on ties
            for b in ("all", "medium", "large"):
                n_gt = gt_area[b]
                flags = [
                    gt is not None and _in_bucket(_record_area(gt), b)
                    for det, gt in matched
                    if gt is None or _in_bucket(_record_area(gt), b)
                ]
                if n_gt == 0 and not flags:
                    continue  # nothing to score in this cell
                ap_cells[(b, t)].append(_interpolated_ap(flags, n_gt))
            for d in MAX_DETS:
                hits = [m for img in image_ids for m in match(img, c, t, d)]
                for b in ("all", "medium", "large"):
                    n_gt = gt_area[b]
                    if n_gt == 0:
                        continue
                    tp = sum(
                        1
                        for _, gt in hits
                        if gt is not None and _in_bucket(_record_area(gt), b)
                    )
                    ar_cells[(b, t, d)].append(tp / n_gt)

    def ap_over(bucket: str, thresholds) -> float:
        cells = [v for t in thresholds for v in ap_cells[(bucket, t)]]
        return _average(cells)

    def ar_over(bucket: str, max_det: int) -> float:
        cells = [v for t in IOU_THRESHOLDS for v in ar_cells[(bucket, t, max_det)]]
        return _average(cells)

    return DetMetrics(
        ap=ap_over("all", IOU_THRESHOLDS),
        ap50=ap_over("all", (0.5,)),
        ap75=ap_over("all", (0.75,)),
        ap_medium=ap_over("medium", IOU_THRESHOLDS),
        ap_large=ap_over("large", IOU_THRESHOLDS),
        ar_1=ar_over("all", 1),
        ar_10=ar_over("all", 10),
        ar_100=ar_over("all", 100),
        ar_medium=ar_over("medium", AP_MAX_DET),
        ar_large=ar_over("large", AP_MAX_DET),
    )


def retrieval_cases(
    data, encoder, protocol: EvalProtocol, mode: IndexMode
) -> list[RetrievalCase]:
    """Encode gallery and picks, match with rejection disabled, collect ranks."""
    for p in data.picks:
        if p.gt_object_id is None:
            raise ValueError(f"pick {p.pick_id!r} has no gt_object_id")
    if encoder is None:
        embedded = np.asarray(data.descriptors, dtype=np.float64)
    else:
        embedded = encode(encoder, data.descriptors)
    index = build_gallery_index(data.gallery, embedded, mode)
    queries = []
    for p in data.picks:
        refs = p.query_object.image_refs
        if protocol is EvalProtocol.PRE_PICK:
            refs = refs[:1]
        queries.append((p.pick_id, embedded[list(refs)]))
    results = match_queries(index, queries, k=3, theta=-1.0)
    by_pick = {p.pick_id: p.gt_object_id for p in data.picks}
    return [
        RetrievalCase(
            pick_id=r.query_id,
            gt_object_id=by_pick[r.query_id],
            ranked_ids=tuple(oid for oid, _ in r.ranked),
        )
        for r in results
    ]


def evaluate_retrieval(
    gallery_manifest,
    picks_manifest,
    encoder,
    protocol: EvalProtocol,
    mode: IndexMode,
) -> dict[str, float]:
    """Recall@{1,2,3} for a gallery/picks manifest pair."""
    data = load_identification_data(gallery_manifest, picks_manifest)
    cases = retrieval_cases(data, encoder, protocol, mode)
    return {f"recall@{k}": recall_at_k(cases, k) for k in (1, 2, 3)}
