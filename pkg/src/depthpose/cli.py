"""Command-line entry point: synth, cluster, train, eval, infer, fuse,
hpselect.

Exit codes: 0 success, 2 validation/usage error, 3 I/O or file-format
error. A JSON config file can predefine options; explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import ddp, evalstats, net, synth
from .container import ContainerError, read_dataset, write_dataset
from .core import Pose, fit_normalizer, normalize, skeleton_preset
from .prototypes import build_prototypes
from .util import THREADS_ENV_VAR, default_threads, substream

log = logging.getLogger("depthpose")


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as f:
        cfg = json.load(f)
    if not isinstance(cfg, dict):
        raise ValueError("config file must contain a JSON object")
    return cfg


def _merged(args: argparse.Namespace, config: dict, key: str, default):
    """Flag value if given, else config-file value, else default."""
    value = getattr(args, key.replace("-", "_"), None)
    if value is not None:
        return value
    return config.get(key, default)


def _split_path(path: str, split: str) -> str:
    root, ext = os.path.splitext(path)
    return f"{root}.{split}{ext or '.dpc'}"


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=None, help="master random seed (default 0)")
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker threads (default ${THREADS_ENV_VAR} or 1)")
    p.add_argument("--config", help="JSON config file; explicit flags override it")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def _threads(args, config) -> int:
    return int(_merged(args, config, "threads", default_threads()))


def _cmd_synth(args) -> int:
    config = _load_config(args.config)
    seed = int(_merged(args, config, "seed", 0))
    scenes = int(_merged(args, config, "scenes", 100))
    cameras = int(_merged(args, config, "cameras", 3))
    skeleton = skeleton_preset(str(_merged(args, config, "skeleton", "itop15")))
    fracs = (float(_merged(args, config, "train-frac", 1.0)),
             float(_merged(args, config, "val-frac", 0.0)),
             float(_merged(args, config, "test-frac", 0.0)))
    sampler = synth.PoseSamplerConfig(
        angle_range=float(_merged(args, config, "angle-range", 0.5)), seed=seed)
    shape = synth.default_body_shape(skeleton)
    splits = synth.generate_dataset(
        scenes, cameras, sampler, shape, skeleton, seed=seed,
        height=int(_merged(args, config, "height", 64)),
        width=int(_merged(args, config, "width", 64)),
        noise_sigma=float(_merged(args, config, "noise", 0.0)),
        background_depth=float(_merged(args, config, "background", 0.0)),
        split_fracs=fracs, threads=_threads(args, config))
    write_dataset(splits.train, args.out)
    written = [(args.out, splits.train)]
    for name, ds in (("val", splits.val), ("test", splits.test)):
        if ds.samples:
            path = _split_path(args.out, name)
            write_dataset(ds, path)
            written.append((path, ds))
    for path, ds in written:
        print(f"{path}: {len(ds.samples)} scenes, {ds.frame_count} frames, "
              f"{os.path.getsize(path)} bytes [{ds.split}]")
    return 0


def _camera_frame_vectors(ds) -> np.ndarray:
    vecs = []
    for s in ds.samples:
        for f in s.frames:
            cam = ds.camera(f.camera_id)
            vecs.append(cam.world_to_camera(s.pose.coords).reshape(-1))
    return np.asarray(vecs, dtype=np.float64)


def _cmd_cluster(args) -> int:
    config = _load_config(args.config)
    seed = int(_merged(args, config, "seed", 0))
    k = int(_merged(args, config, "k", 16))
    preset_name = str(_merged(args, config, "preset", "ddp-desk"))
    ds = read_dataset(args.dataset)
    targets = _camera_frame_vectors(ds)
    if targets.shape[0] < 2:
        raise ValueError("dataset must contain at least 2 pose views")
    normalizer = fit_normalizer(targets)
    protos = build_prototypes(normalize(targets, normalizer), k, ds.skeleton,
                              normalizer, seed=seed)
    cfg = ddp.TrainConfig(k=k, seed=seed, preset=preset_name)
    spec = net.preset(preset_name, k)
    state = net.init_network(spec, seed=seed)
    model = ddp.TrainedModel(spec, state, "ddp", ds.skeleton, normalizer, protos,
                             cfg, {"trained": False})
    ddp.save_model(model, args.out)
    print(f"{args.out}: prototype scaffold with K={protos.k} columns "
          f"({targets.shape[0]} pose views clustered)")
    return 0


def _train_config(args, config, seed) -> ddp.TrainConfig:
    base = {k: v for k, v in config.items() if k in (
        "k", "sigma2", "alpha", "lr0", "epochs", "batch", "momentum",
        "head", "preset", "segment", "lr_decay", "lr_decay_at", "preproc")}
    cfg = ddp.TrainConfig.from_dict(base) if base else ddp.TrainConfig()
    overrides = {}
    for name in ("k", "sigma2", "alpha", "lr0", "epochs", "batch", "momentum",
                 "head", "preset"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "segment", False):
        overrides["segment"] = True
    from dataclasses import replace
    return replace(cfg, seed=seed, **overrides)


def _cmd_train(args) -> int:
    config = _load_config(args.config)
    seed = int(_merged(args, config, "seed", 0))
    cfg = _train_config(args, config, seed)
    train_ds = read_dataset(args.dataset)
    val_ds = read_dataset(args.val) if args.val else None
    prototypes = None
    if args.prototypes:
        prototypes = ddp.load_model(args.prototypes).prototypes
    model = ddp.train(train_ds, cfg, val_dataset=val_ds, prototypes=prototypes,
                      threads=_threads(args, config))
    ddp.save_model(model, args.out)
    loss_log = args.loss_log or args.out + ".losses.csv"
    with open(loss_log, "w") as f:
        f.write("epoch,lr,train_loss,val_loss,val_mse\n")
        hist = model.history
        for e in range(len(hist["train_loss"])):
            val_l = hist["val_loss"][e] if e < len(hist["val_loss"]) else ""
            val_m = hist["val_mse"][e] if e < len(hist["val_mse"]) else ""
            f.write(f"{e + 1},{hist['lr'][e]:.3e},{hist['train_loss'][e]:.9f},{val_l},{val_m}\n")
    print(f"{args.out}: trained {cfg.head} head (K={cfg.k}, preset {cfg.preset}, "
          f"{cfg.epochs} epochs); final train loss {model.history['train_loss'][-1]:.5f}")
    print(f"{loss_log}: per-epoch loss log")
    return 0


def _predictions(model, ds, threads):
    """Per-view predictions and matching camera-frame ground truth."""
    frames, gts = [], []
    for s in ds.samples:
        for f in s.frames:
            cam = ds.camera(f.camera_id)
            frames.append(f)
            gts.append(Pose(ds.skeleton, cam.world_to_camera(s.pose.coords),
                            frame=f"camera:{f.camera_id}"))
    preds = ddp.infer_batch(model, frames, threads=threads)
    return preds, gts


def _mean_pose_baseline(ds) -> float:
    """Average joint error (cm) of always predicting the dataset's mean
    camera-frame pose."""
    vecs = _camera_frame_vectors(ds)
    mean = vecs.mean(axis=0)
    d = (vecs.reshape(len(vecs), -1, 3) - mean.reshape(-1, 3))
    return float(np.linalg.norm(d, axis=2).mean() * 100.0)


def _write_reports(report, out_prefix: str, extra: dict | None = None):
    evalstats.write_report_json(report, out_prefix + ".json", extra=extra)
    evalstats.write_curve_csv(report, out_prefix + ".csv")
    evalstats.write_curve_svg(report, out_prefix + ".svg")


def _cmd_eval(args) -> int:
    config = _load_config(args.config)
    threads = _threads(args, config)
    model = ddp.load_model(args.model)
    ds = read_dataset(args.dataset)
    if not ds.samples:
        raise ValueError("dataset is empty")
    preds, gts = _predictions(model, ds, threads)
    report = evalstats.evaluate_poses(preds, gts)
    baseline = _mean_pose_baseline(ds)
    _write_reports(report, args.out, extra={"mean_pose_baseline_cm": baseline})
    print(f"average error: {report.average_error_cm:.3f} cm "
          f"(mean-pose baseline {baseline:.3f} cm)")
    print(f"precision@10cm: {report.precision_at_10cm:.4f}  AUC: {report.auc:.4f}")
    print(f"wrote {args.out}.json / .csv / .svg")
    return 0


def _cmd_infer(args) -> int:
    model = ddp.load_model(args.model)
    ds = read_dataset(args.dataset)
    matches = [s for s in ds.samples if s.scene_id == args.scene]
    if not matches:
        raise ValueError(f"scene {args.scene} not found in dataset")
    sample = matches[0]
    out = {"scene": args.scene, "views": []}
    for f in sample.frames:
        if args.view is not None and f.camera_id != args.view:
            continue
        cam = ds.camera(f.camera_id)
        pose_cam = ddp.infer(model, f)
        pose_world = ddp.camera_to_world(pose_cam, cam)
        out["views"].append({
            "camera": f.camera_id,
            "camera_frame": pose_cam.coords.tolist(),
            "world_frame": pose_world.coords.tolist(),
        })
    if not out["views"]:
        raise ValueError(f"view {args.view!r} not found in scene {args.scene}")
    with open(args.out, "w") as f:
        json.dump(out, f, indent=2)
        f.write("\n")
    print(f"{args.out}: {len(out['views'])} view estimate(s) for scene {args.scene}")
    return 0


def _cmd_fuse(args) -> int:
    config = _load_config(args.config)
    threads = _threads(args, config)
    model = ddp.load_model(args.model)
    ds = read_dataset(args.dataset)
    if not ds.samples:
        raise ValueError("dataset is empty")
    n_views = len(ds.samples[0].frames)
    if args.weights:
        weights = ddp.FusionWeights(np.asarray([float(x) for x in args.weights.split(",")]))
    else:
        weights = ddp.FusionWeights.equal(n_views)

    frames = [f for s in ds.samples for f in s.frames]
    preds = ddp.infer_batch(model, frames, threads=threads)
    fused_preds, fused_gts = [], []
    i = 0
    for s in ds.samples:
        views = []
        for f in s.frames:
            views.append(ddp.camera_to_world(preds[i], ds.camera(f.camera_id)))
            i += 1
        fused_preds.append(ddp.fuse_multiview(views, weights))
        fused_gts.append(s.pose)
    report = evalstats.evaluate_poses(fused_preds, fused_gts)
    _write_reports(report, args.out, extra={"fusion_weights": weights.values.tolist()})
    print(f"fused average error: {report.average_error_cm:.3f} cm over "
          f"{len(fused_preds)} scenes (weights {weights.values.tolist()})")
    print(f"wrote {args.out}.json / .csv / .svg")
    return 0


def _cmd_hpselect(args) -> int:
    config = _load_config(args.config)
    seed = int(_merged(args, config, "seed", 0))
    threads = _threads(args, config)
    train_ds = read_dataset(args.dataset)
    val_ds = read_dataset(args.val)
    values = [float(v) for v in args.values.split(",")]
    if args.param == "k":
        values = [int(v) for v in values]
    metric = args.metric or ("loss" if args.param == "k" else "mse")

    base = _train_config(args, config, seed)
    runs: dict[str, list[float]] = {}
    from dataclasses import replace
    for value in values:
        name = f"{args.param}={value}"
        scores = []
        for s in range(args.seeds):
            cfg = replace(base, seed=int(substream(seed, f"hp/{value}/{s}").integers(2 ** 32)),
                          **{args.param: value})
            model = ddp.train(train_ds, cfg, val_dataset=val_ds, threads=threads)
            key = "val_loss" if metric == "loss" else "val_mse"
            scores.append(model.history[key][-1])
            log.info("hpselect %s seed %d -> %s %.5f", name, s, metric, scores[-1])
        runs[name] = scores
    result = evalstats.select_hyperparameter(runs)
    evalstats.write_p_matrix_csv(result, args.out + ".pvalues.csv")
    summary = {
        "param": args.param,
        "metric": metric,
        "means": result.means,
        "chosen": result.chosen,
        "statistically_tied": list(result.tied_with_chosen),
        "scores": runs,
    }
    with open(args.out + ".json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"chosen: {result.chosen} (mean {metric} {result.means[result.chosen]:.5f})")
    if result.tied_with_chosen:
        print("statistically tied:", ", ".join(result.tied_with_chosen))
    print(f"wrote {args.out}.json and {args.out}.pvalues.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="depthpose",
        description="Depth-map 3D pose estimation via prototype-pose combination.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multiview depth dataset")
    p.add_argument("--scenes", type=int, default=None)
    p.add_argument("--cameras", type=int, default=None)
    p.add_argument("--skeleton", default=None, help="itop15 or ubc3v18")
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--noise", type=float, default=None, help="depth noise sigma (m)")
    p.add_argument("--background", type=float, default=None, help="background plane depth (m)")
    p.add_argument("--angle-range", type=float, default=None, help="pose sampler range (rad)")
    p.add_argument("--train-frac", type=float, default=None)
    p.add_argument("--val-frac", type=float, default=None)
    p.add_argument("--test-frac", type=float, default=None)
    p.add_argument("-o", "--out", required=True, help="output .dpc path (train split)")
    _add_common(p)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("cluster", help="learn a prototype dictionary from a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--preset", default=None)
    p.add_argument("-o", "--out", required=True, help="output .dpm scaffold path")
    _add_common(p)
    p.set_defaults(func=_cmd_cluster)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--val", help="validation dataset (.dpc)")
    p.add_argument("--prototypes", help="reuse prototypes from a model/scaffold file")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--sigma2", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--lr0", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--head", choices=["ddp", "baseline"], default=None)
    p.add_argument("--preset", default=None, help="ddp-paper or ddp-desk")
    p.add_argument("--segment", action="store_true", help="enable foreground segmentation")
    p.add_argument("--loss-log", help="CSV loss log path (default <out>.losses.csv)")
    p.add_argument("-o", "--out", required=True, help="output .dpm model path")
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a model per view")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("-o", "--out", required=True, help="report prefix (.json/.csv/.svg)")
    _add_common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("infer", help="estimate poses for one scene")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--scene", type=int, required=True)
    p.add_argument("--view", help="camera id (default: all views)")
    p.add_argument("-o", "--out", required=True, help="output JSON path")
    _add_common(p)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("fuse", help="evaluate multiview fusion of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--weights", help="comma-separated per-camera weights summing to 1")
    p.add_argument("-o", "--out", required=True, help="report prefix (.json/.csv/.svg)")
    _add_common(p)
    p.set_defaults(func=_cmd_fuse)

    p = sub.add_parser("hpselect", help="statistical hyperparameter selection")
    p.add_argument("--dataset", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--param", choices=["k", "sigma2", "alpha"], required=True)
    p.add_argument("--values", required=True, help="comma-separated values to compare")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--metric", choices=["loss", "mse"],
                   help="selection metric (default: loss for k, mse otherwise)")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--sigma2", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--preset", default=None)
    p.add_argument("--head", choices=["ddp", "baseline"], default=None)
    p.add_argument("-o", "--out", required=True, help="output prefix")
    _add_common(p)
    p.set_defaults(func=_cmd_hpselect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ContainerError as e:
        print(f"file format error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
