"""Command-line entry point.

Subcommands: gen-synth, train, match, detect, eval-retrieval, eval-detection.
All outputs are written with sorted keys and fixed float formatting so a
rerun with identical inputs and seed produces byte-identical files; the
``--jobs`` flag sizes worker pools without affecting any result.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import backbone, codec, evaluation, pipeline, synthdata, training
from .matcher import IndexMode, build_gallery_index, match_queries


def _load_encoder(path: str | None) -> backbone.Encoder | None:
    """None means the identity map: descriptors are matched directly."""
    if path is None:
        return None
    encoder, _ = backbone.load_checkpoint(path)
    return encoder


def _embed(encoder, rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    return rows if encoder is None else backbone.encode(encoder, rows)


def cmd_gen_synth(args) -> int:
    spec = synthdata.SynthSpec(
        n_objects=args.objects,
        n_faces=args.faces,
        dim=args.dim,
        gallery_views=args.gallery_views,
        query_views=args.query_views,
        n_picks=args.picks,
        noise_sigma=args.noise,
        distractor_fraction=args.distractor_fraction,
        seed=args.seed,
        scene_images=args.scene_images,
        scene_objects=args.scene_objects,
        scene_size=args.scene_size,
    )
    out = Path(args.out)
    paths = synthdata.gen_identification_dataset(spec, out)
    for cluttered in (False, True):
        paths.update(
            {
                f"scene_{'cluttered' if cluttered else 'clean'}": synthdata.gen_detection_scene(
                    spec, out, cluttered
                )
            }
        )
    print(f"wrote synthetic dataset to {out}")
    return 0


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = codec.load_identification_data(args.gallery, args.picks)
    schedule = backbone.LrSchedule.parse(args.schedule)
    config = training.TrainConfig(
        batch_size=args.batch_size,
        margin=args.margin,
        schedule=schedule,
        seed=args.seed,
        single_query_prob=args.single_query_prob,
        workers=args.workers,
    )

    if args.resume:
        encoder, start_epoch = backbone.load_checkpoint(args.resume)
    else:
        dims = [int(d) for d in args.dims.split(",")]
        if dims[0] != data.descriptors.shape[1]:
            raise ValueError(
                f"encoder input dim {dims[0]} != descriptor dim {data.descriptors.shape[1]}"
            )
        encoder = backbone.init_encoder(dims, args.seed, frozen_first_layer=args.freeze_first_layer)
        start_epoch = 0

    if args.eval_picks:
        train_data = data
        holdout = codec.load_identification_data(args.gallery, args.eval_picks)
    else:
        train_picks, holdout_picks = training.split_picks(
            data.picks, args.holdout_fraction, args.seed
        )
        train_data = codec.IdentificationData(
            descriptors=data.descriptors, gallery=data.gallery, picks=tuple(train_picks)
        )
        holdout = codec.IdentificationData(
            descriptors=data.descriptors, gallery=data.gallery, picks=tuple(holdout_picks)
        )

    stats = training.train(
        encoder,
        train_data,
        config,
        holdout=holdout,
        start_epoch=start_epoch,
        jobs=args.jobs,
    )

    backbone.save_checkpoint(
        encoder, out / "encoder.bin",
        epochs_trained=max(start_epoch, schedule.total_epochs),
    )
    with open(out / "metrics.jsonl", "w") as fh:
        for s in stats:
            row = {
                "epoch": s.epoch,
                "lr": s.lr,
                "mean_loss": s.mean_loss,
                "holdout_recall1": s.holdout_recall1,
            }
            fh.write(json.dumps(codec.round_floats(row), sort_keys=True) + "\n")
    last = stats[-1].holdout_recall1 if stats else None
    print(f"trained {len(stats)} epochs; holdout recall@1 = {last}")
    return 0


def cmd_match(args) -> int:
    encoder = _load_encoder(args.encoder)
    gal = codec.load_manifest(args.gallery)
    if not gal.gallery:
        raise ValueError(f"{args.gallery}: manifest has no gallery objects")
    queries_manifest = codec.load_manifest(args.queries)
    gal_emb = _embed(encoder, gal.descriptors.data)
    index = build_gallery_index(gal.gallery, gal_emb, IndexMode(args.mode))
    q_emb = (
        _embed(encoder, queries_manifest.descriptors.data)
        if queries_manifest.descriptors.count
        else np.zeros((0, 1))
    )
    queries = [
        (p.pick_id, q_emb[list(p.query_object.image_refs)])
        for p in queries_manifest.picks
    ]
    results = match_queries(index, queries, k=args.k, theta=args.theta)
    doc = [
        {
            "query_id": r.query_id,
            "accepted": r.accepted,
            "ranked": [{"object_id": oid, "score": s} for oid, s in r.ranked],
        }
        for r in results
    ]
    codec.dump_json(doc, args.out)
    print(f"matched {len(results)} queries -> {args.out}")
    return 0


def cmd_detect(args) -> int:
    encoder = _load_encoder(args.encoder)
    dets = pipeline.run_detection(
        args.scene,
        args.gallery,
        encoder,
        theta=args.theta,
        mode=IndexMode(args.mode),
        min_area=args.min_area,
        resolve_overlaps=not args.no_overlap_resolution,
        jobs=args.jobs,
    )
    codec.write_detections(dets, args.out)
    print(f"{len(dets)} detections -> {args.out}")
    return 0


def cmd_eval_retrieval(args) -> int:
    encoder = _load_encoder(args.encoder)
    report = evaluation.evaluate_retrieval(
        args.gallery,
        args.picks,
        encoder,
        evaluation.EvalProtocol(args.protocol),
        IndexMode(args.mode),
    )
    report.update({"protocol": args.protocol, "mode": args.mode})
    codec.dump_json(report, args.out)
    print(json.dumps(codec.round_floats(report), sort_keys=True))
    return 0


def cmd_eval_detection(args) -> int:
    dets = codec.read_detections(args.detections)
    gt = codec.read_detections(args.gt)
    metrics = evaluation.coco_eval(dets, gt, evaluation.IouKind(args.iou_kind))
    report = dict(metrics.to_dict())
    report["iou_kind"] = args.iou_kind
    codec.dump_json(report, args.out)
    print(json.dumps(codec.round_floats(report), sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctlkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic dataset")
    p.add_argument("--objects", type=int, default=50)
    p.add_argument("--faces", type=int, default=2)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--gallery-views", type=int, default=5)
    p.add_argument("--query-views", type=int, default=3)
    p.add_argument("--picks", type=int, default=200)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--distractor-fraction", type=float, default=0.0)
    p.add_argument("--scene-images", type=int, default=4)
    p.add_argument("--scene-objects", type=int, default=4)
    p.add_argument("--scene-size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train an encoder with the centroid triplet loss")
    p.add_argument("--gallery", required=True)
    p.add_argument("--picks", required=True)
    p.add_argument("--eval-picks", help="separate holdout picks manifest")
    p.add_argument("--holdout-fraction", type=float, default=0.2)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--margin", type=float, default=0.2)
    p.add_argument("--schedule", default="40:1e-3,30:1e-4,30:1e-5")
    p.add_argument("--dims", default="32,16", help="comma-separated layer dims")
    p.add_argument("--freeze-first-layer", action="store_true")
    p.add_argument("--single-query-prob", type=float, default=0.5)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("match", help="match query objects against a gallery")
    p.add_argument("--gallery", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--mode", choices=["centroid", "instance"], default="instance")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--theta", type=float, default=0.6)
    p.add_argument("--encoder")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("detect", help="run the detection pipeline on a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--theta", type=float, default=0.6)
    p.add_argument("--mode", choices=["centroid", "instance"], default="instance")
    p.add_argument("--min-area", type=int, default=1)
    p.add_argument("--no-overlap-resolution", action="store_true")
    p.add_argument("--encoder")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval-retrieval", help="Recall@k of a gallery/picks pair")
    p.add_argument("--gallery", required=True)
    p.add_argument("--picks", required=True)
    p.add_argument("--protocol", choices=["pre", "post"], default="post")
    p.add_argument("--mode", choices=["centroid", "instance"], default="instance")
    p.add_argument("--encoder")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("eval-detection", help="COCO-style AP/AR of a detections file")
    p.add_argument("--detections", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--iou-kind", choices=["box", "mask"], default="mask")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_detection)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface a machine-readable error, nonzero exit
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
