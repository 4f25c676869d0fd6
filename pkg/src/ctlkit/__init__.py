"""Centroid-triplet-loss object identification on descriptor vectors.

A desk-scale trainer, a multi-query/multi-gallery cosine matcher with
threshold rejection, a segment-filtration detection pipeline, and the
retrieval/detection metrics to verify all of it.
"""

from .backbone import (
    Encoder,
    LrSchedule,
    encode,
    encoder_backward,
    identity_encoder,
    init_encoder,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    sgd_step,
)
from .batching import EpochPlan, Triplet, TripletBatch, generate_triplets, pack_batches, partition_batches
from .codec import (
    DescriptorMatrix,
    DetectionRecord,
    IdentificationData,
    ObjectRecord,
    PickRecord,
    SegmentMask,
    load_identification_data,
    load_manifest,
    mask_to_bbox,
    read_descriptor_file,
    write_descriptor_file,
)
from .ctl import (
    CentroidIndex,
    QueryRep,
    TripletIds,
    compute_centroids,
    ctl_backward,
    ctl_forward,
    sample_query_representation,
    scatter_centroid_grads,
)
from .evaluation import (
    DetMetrics,
    EvalProtocol,
    IouKind,
    coco_eval,
    evaluate_retrieval,
    iou_bbox,
    iou_mask,
    recall_at_k,
)
from .matcher import (
    GalleryIndex,
    IndexMode,
    MatchResult,
    build_gallery_index,
    cosine_similarity,
    match_many_to_many,
    match_queries,
)
from .pipeline import CandidateSegment, LabeledSegment, assemble_instance_map, filter_segments, run_detection
from .synthdata import SynthSpec, gen_detection_scene, gen_identification_dataset
from .training import TrainConfig, train

__version__ = "0.1.0"
