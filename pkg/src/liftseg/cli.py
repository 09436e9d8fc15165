"""Command-line surface for the lifting pipeline.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  With ``--json``
runtime failures are reported as a JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import evaluate, gradcheck, instance, synth, train, vote, weightnet
from .detect import compute_membership, load_detections
from .geom import (
    DEFAULT_DEPTH_EPS,
    DEFAULT_DISTANCE,
    DEFAULT_RESOLUTION,
    DEFAULT_SPLAT_RADIUS,
    compute_visibility,
    fixed_viewpoints,
    load_cloud,
    save_visibility,
)


def _camera_flags(p: argparse.ArgumentParser, with_views: bool = False) -> None:
    if with_views:
        p.add_argument("--views", type=int, default=10, help="number of viewpoints")
    p.add_argument("--distance", type=float, default=DEFAULT_DISTANCE)
    p.add_argument("--res", type=int, default=DEFAULT_RESOLUTION)
    p.add_argument("--splat-radius", type=float, default=DEFAULT_SPLAT_RADIUS)
    p.add_argument("--depth-eps", type=float, default=DEFAULT_DEPTH_EPS)


def _write_json(doc: dict, path: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path:
        with open(path, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _load_objects(objects_dir: str, mode: str, threads: int) -> list[train.PipelineObject]:
    subdirs = sorted(
        d
        for d in os.listdir(objects_dir)
        if os.path.isdir(os.path.join(objects_dir, d))
    )
    if not subdirs:
        raise ValueError(f"{objects_dir}: no bundle subdirectories found")
    objects = []
    for d in subdirs:
        bundle = synth.load_bundle(os.path.join(objects_dir, d))
        membership = compute_membership(
            bundle.scene.cloud, bundle.cameras, bundle.detections, mode
        )
        objects.append(
            train.PipelineObject(
                scene=bundle.scene,
                cameras=bundle.cameras,
                detections=bundle.detections,
                visibility=bundle.visibility,
                membership=membership,
            )
        )
    return objects


def _octaves_from_checkpoint(params: weightnet.WeightNetParams, feature_dim: int) -> int:
    extra = params.input_dim - feature_dim
    if extra % 5 or ((extra // 5) - 1) % 2:
        raise ValueError(
            f"checkpoint input dim {params.input_dim} is inconsistent with "
            f"feature dim {feature_dim}"
        )
    return ((extra // 5) - 1) // 2


def cmd_synth(args) -> int:
    spec = synth.load_spec(args.spec)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    bundle = synth.generate(spec)
    synth.emit(bundle, args.out)
    print(
        f"bundle: {bundle.scene.cloud.n} points, "
        f"{bundle.scene.partition.num_super_points} super points, "
        f"{len(bundle.detections)} detections -> {args.out}"
    )
    return 0


def cmd_visibility(args) -> int:
    scene = load_cloud(args.cloud)
    cameras = fixed_viewpoints(args.views, args.distance, args.res, args.res)
    vis = compute_visibility(
        scene.cloud, cameras, args.splat_radius, args.depth_eps, args.threads
    )
    save_visibility(vis, args.out)
    print(f"visibility: {int(vis.mask.sum())} visible point-views -> {args.out}")
    return 0


def _prepare_object(args, mode: str) -> train.PipelineObject:
    scene = load_cloud(args.cloud)
    detections = load_detections(args.detections)
    cameras = fixed_viewpoints(
        detections.num_views, args.distance, args.res, args.res
    )
    vis = compute_visibility(
        scene.cloud, cameras, args.splat_radius, args.depth_eps, args.threads
    )
    membership = compute_membership(scene.cloud, cameras, detections, mode)
    return train.PipelineObject(
        scene=scene,
        cameras=cameras,
        detections=detections,
        visibility=vis,
        membership=membership,
    )


def cmd_lift(args) -> int:
    obj = _prepare_object(args, args.membership)
    smat = vote.score_unweighted(
        obj.scene.partition,
        obj.visibility,
        obj.membership,
        obj.detections,
        args.null_threshold,
    )
    labeling = vote.assign_labels(smat, obj.scene.partition, args.null_threshold)
    vote.save_labeling(labeling, args.out_labels)
    if args.out_scores:
        vote.save_scores(smat, obj.detections.label_names, args.out_scores)
    labeled = int(np.count_nonzero(labeling.super_point_labels >= 0))
    print(
        f"lift: {labeled}/{obj.scene.partition.num_super_points} super points "
        f"labeled -> {args.out_labels}"
    )
    return 0


def _train_config(args) -> train.TrainConfig:
    values: dict = {}
    if args.config:
        import tomli

        with open(args.config, "rb") as f:
            values.update(tomli.load(f))
    for key in (
        "epochs",
        "lr",
        "optimizer",
        "seed",
        "loss",
        "mix_weight",
        "tau",
        "pe_octaves",
        "hidden",
        "null_score_init",
        "init_std",
    ):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return train.TrainConfig(**values)


def cmd_train(args) -> int:
    config = _train_config(args)
    objects = _load_objects(args.objects, args.membership, args.threads)
    val_objects = (
        _load_objects(args.val_objects, args.membership, args.threads)
        if args.val_objects
        else None
    )
    params, report = train.train(objects, config, val_objects)
    weightnet.save_checkpoint(params, args.out_checkpoint, seed=config.seed)
    _write_json(report.to_dict(), args.out_report)
    print(
        f"train: {config.epochs} epochs, final loss "
        f"{report.epoch_losses[-1]:.6f}, val mIoU {report.final_val_miou:.4f} "
        f"-> {args.out_checkpoint}"
    )
    return 0


def _weighted_labeling(args, obj: train.PipelineObject):
    params = weightnet.load_checkpoint(args.checkpoint)
    octaves = _octaves_from_checkpoint(params, obj.detections.feature_dim)
    batch = weightnet.assemble_inputs(obj.detections, obj.cameras, octaves)
    _, _, _, normalized = train.weighted_pipeline(params, obj, batch)
    return vote.assign_labels(normalized, obj.scene.partition), normalized


def cmd_lift_weighted(args) -> int:
    obj = _prepare_object(args, args.membership)
    labeling, normalized = _weighted_labeling(args, obj)
    vote.save_labeling(labeling, args.out_labels)
    if args.out_scores:
        vote.save_scores(normalized, obj.detections.label_names, args.out_scores)
    labeled = int(np.count_nonzero(labeling.super_point_labels >= 0))
    print(
        f"lift-weighted: {labeled}/{obj.scene.partition.num_super_points} "
        f"super points labeled -> {args.out_labels}"
    )
    return 0


def cmd_eval_sem(args) -> int:
    items = []
    pairs: list[tuple[str, str, str]] = []
    if args.pairs:
        with open(args.pairs) as f:
            for lineno, ln in enumerate(f, start=1):
                if not ln.strip():
                    continue
                fields = ln.split()
                if len(fields) not in (2, 3):
                    raise ValueError(
                        f"{args.pairs}:{lineno}: expected 'cloud pred [category]'"
                    )
                pairs.append(
                    (fields[0], fields[1], fields[2] if len(fields) == 3 else "default")
                )
    if args.cloud and args.pred:
        pairs.append((args.cloud, args.pred, args.category))
    if not pairs:
        raise ValueError("eval-sem needs --cloud/--pred or --pairs")
    for cloud_path, pred_path, category in pairs:
        scene = load_cloud(cloud_path)
        pred = vote.load_point_labels(pred_path)
        items.append(
            evaluate.SemanticItem(
                category=category,
                gt_labels=scene.gt_labels,
                pred_labels=pred,
                label_names=tuple(scene.label_names),
            )
        )
    _write_json(evaluate.semantic_report(items), args.out)
    return 0


def cmd_eval_inst(args) -> int:
    obj = _prepare_object(args, args.membership)
    partition = obj.scene.partition
    if args.checkpoint:
        labeling, scores = _weighted_labeling(args, obj)
    else:
        scores = vote.score_unweighted(
            partition, obj.visibility, obj.membership, obj.detections,
            args.null_threshold,
        )
        labeling = vote.assign_labels(scores, partition, args.null_threshold)
    radius = args.adjacency_radius or instance.default_adjacency_radius(obj.scene.cloud)
    adjacency = instance.superpoint_adjacency(obj.scene.cloud, partition, radius)
    seg = instance.merge_instances(
        labeling, adjacency, obj.membership, obj.visibility, args.inclusion_threshold
    )
    inst_scores = instance.instance_scores(seg, scores)
    preds = instance.records_from_segmentation(
        seg, inst_scores, object_id="object", category=args.category
    )
    gt_ids, gt_labels = instance.load_instances(args.gt_instances)
    gts = instance.records_from_gt_instances(
        gt_ids, gt_labels, object_id="object", category=args.category
    )

    def named(result):
        doc = result.to_dict()
        names = obj.detections.label_names
        doc["per_group"] = {
            (f"{k.rsplit('/', 1)[0]}/{names[int(k.rsplit('/', 1)[1])]}"
             if "/" in k else k): v
            for k, v in doc["per_group"].items()
        }
        return doc

    doc = {
        "part_aware": named(instance.map50(preds, gts, "part_aware")),
        "part_agnostic": named(instance.map50(preds, gts, "part_agnostic")),
        "num_predicted_instances": seg.num_instances,
        "num_gt_instances": len(gts),
    }
    _write_json(doc, args.out)
    if args.out_instances:
        instance.save_instances(seg, labeling, args.out_instances)
    return 0


def cmd_baseline_conf(args) -> int:
    objects = _load_objects(args.objects, args.membership, args.threads)
    miou = train.evaluate_confidence_baseline(
        objects, args.mode, args.tau, args.null_score
    )
    _write_json({"mode": args.mode, "miou": miou}, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(args.seed or 0, args.instances)
    failed = False
    for res in results:
        status = "PASS" if res.ok else "FAIL"
        print(f"{status} {res.name}: max rel err {res.max_rel_err:.3e} (tol {res.tolerance:.0e})")
        failed |= not res.ok
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="liftseg",
        description="Lift per-view 2D part detections onto 3D point clouds",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--json", action="store_true", help="machine-readable errors")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("synth", help="generate a synthetic bundle from a scene spec")
    common(p)
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("visibility", help="compute a visibility file for a cloud")
    common(p)
    p.add_argument("--cloud", required=True)
    p.add_argument("--out", required=True)
    _camera_flags(p, with_views=True)
    p.set_defaults(func=cmd_visibility)

    p = sub.add_parser("lift", help="unweighted voting path")
    common(p)
    p.add_argument("--cloud", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--out-labels", required=True)
    p.add_argument("--out-scores", default=None)
    p.add_argument("--null-threshold", type=float, default=vote.DEFAULT_NULL_THRESHOLD)
    p.add_argument("--membership", choices=("box", "mask"), default="box")
    _camera_flags(p)
    p.set_defaults(func=cmd_lift)

    p = sub.add_parser("train", help="train the weight network on bundle objects")
    common(p)
    p.add_argument("--objects", required=True)
    p.add_argument("--val-objects", default=None)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--out-report", required=True)
    p.add_argument("--config", default=None, help="TOML config file")
    p.add_argument("--membership", choices=("box", "mask"), default="box")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default=None)
    p.add_argument("--loss", choices=train.LOSS_KINDS, default=None)
    p.add_argument("--mix-weight", dest="mix_weight", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--pe-octaves", dest="pe_octaves", type=int, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--null-score-init", dest="null_score_init", type=float, default=None)
    p.add_argument("--init-std", dest="init_std", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("lift-weighted", help="weighted voting with a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--out-labels", required=True)
    p.add_argument("--out-scores", default=None)
    p.add_argument("--membership", choices=("box", "mask"), default="box")
    _camera_flags(p)
    p.set_defaults(func=cmd_lift_weighted)

    p = sub.add_parser("eval-sem", help="semantic mIoU report")
    common(p)
    p.add_argument("--cloud", default=None)
    p.add_argument("--pred", default=None)
    p.add_argument("--category", default="default")
    p.add_argument("--pairs", default=None, help="file of 'cloud pred [category]' lines")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval_sem)

    p = sub.add_parser("eval-inst", help="instance mAP50 report")
    common(p)
    p.add_argument("--cloud", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--gt-instances", required=True)
    p.add_argument("--checkpoint", default=None, help="omit for the unweighted path")
    p.add_argument("--null-threshold", type=float, default=vote.DEFAULT_NULL_THRESHOLD)
    p.add_argument("--membership", choices=("box", "mask"), default="box")
    p.add_argument("--adjacency-radius", type=float, default=None)
    p.add_argument("--inclusion-threshold", type=float, default=0.5)
    p.add_argument("--category", default="default")
    p.add_argument("--out", default=None)
    p.add_argument("--out-instances", default=None)
    _camera_flags(p)
    p.set_defaults(func=cmd_eval_inst)

    p = sub.add_parser("baseline-conf", help="confidence-as-weight baselines")
    common(p)
    p.add_argument("--objects", required=True)
    p.add_argument("--mode", choices=("raw", "normalized"), required=True)
    p.add_argument("--membership", choices=("box", "mask"), default="box")
    p.add_argument("--tau", type=float, default=weightnet.DEFAULT_TAU)
    p.add_argument("--null-score", type=float, default=weightnet.DEFAULT_NULL_SCORE_INIT)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_baseline_conf)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    common(p)
    p.add_argument("--instances", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError, KeyError) as e:
        if getattr(args, "json", False):
            sys.stderr.write(
                json.dumps({"error": {"type": type(e).__name__, "message": str(e)}})
                + "\n"
            )
        else:
            sys.stderr.write(f"liftseg: error: {e}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
