"""Command-line pipeline: classify -> trajectory -> simulate -> reconstruct -> evaluate.

Each stage writes under ``<out>/<stage>/`` and records its artifacts (with
SHA-256 digests) in ``<out>/manifest.json``. Exit codes: 0 success,
1 stage failure, 2 configuration error.
"""

import argparse
import copy
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import io
from .exceptions import ConfigInvalid, StageFailed
from .geometry import Intrinsics, look_at
from .trajectory import MotionType, TrajectoryParams, generate_trajectory, trajectory_from_json, trajectory_to_json

SCHEMA_VERSION = 1
FALLBACK_MOTION = MotionType.ZoomIn  # used when neither an override nor a classifier is given

DEFAULT_CONFIG = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "scene": {"path": None, "kind": "dynamic", "n_points": 1500},
    "motion": None,
    "classifier": None,
    "input_image": None,
    "trajectory": {
        "frames": 12,
        "magnitude": None,
        "eye": [0.0, -0.3, -2.5],
        "target": [0.0, 0.0, 0.0],
        "up": [0.0, 1.0, 0.0],
        "pivot": [0.0, 0.0, 0.0],
    },
    "image": {"width": 64, "height": 64, "fov": 1.0},
    "fps": 8.0,
    "tau": 1.5,
    "holdout_stride": 2,
    "field": {"epochs": 3, "learning_rate": 1e-3, "max_points": 800, "batch_size": 256},
    "out": "pose4d-out",
}


# ---------------------------------------------------------------------- config


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigInvalid(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and k != "scene" or (k == "scene" and isinstance(v, dict)):
            if not isinstance(v, dict):
                raise ConfigInvalid(f"config key {path + k!r} must be an object")
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = v
    return out


def load_config(path=None, overrides=None):
    """Defaults, then the JSON file, then command-line overrides; validated."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigInvalid(f"config file {path} does not exist")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigInvalid(f"config is not valid JSON: {e}") from None
        if not isinstance(data, dict):
            raise ConfigInvalid("config must be a JSON object")
        if data.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ConfigInvalid(f"unsupported schema_version {data.get('schema_version')}")
        cfg = _merge(cfg, data)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "frames":
            cfg["trajectory"]["frames"] = value
        else:
            cfg[key] = value
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    T = cfg["trajectory"]["frames"]
    if not isinstance(T, int) or T < 1:
        raise ConfigInvalid("trajectory.frames must be an integer >= 1")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigInvalid("seed must be a non-negative integer")
    if cfg["motion"] is not None:
        try:
            MotionType.parse(cfg["motion"])
        except ValueError as e:
            raise ConfigInvalid(str(e)) from None
    for key in ("classifier", "input_image"):
        if cfg[key] is not None and not Path(cfg[key]).exists():
            raise ConfigInvalid(f"{key} path {cfg[key]} does not exist")
    if cfg["scene"]["path"] is not None and not Path(cfg["scene"]["path"]).exists():
        raise ConfigInvalid(f"scene path {cfg['scene']['path']} does not exist")
    if cfg["scene"]["kind"] not in ("dynamic", "static"):
        raise ConfigInvalid("scene.kind must be 'dynamic' or 'static'")
    if cfg["holdout_stride"] < 1:
        raise ConfigInvalid("holdout_stride must be >= 1")
    if cfg["tau"] < 0 or cfg["fps"] <= 0:
        raise ConfigInvalid("tau must be >= 0 and fps > 0")
    img = cfg["image"]
    if img["width"] < 8 or img["height"] < 8 or not 0 < img["fov"] < np.pi:
        raise ConfigInvalid("image must be at least 8x8 with 0 < fov < pi")


def config_hash(cfg):
    body = {k: v for k, v in cfg.items() if k != "out"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def intrinsics_of(cfg):
    img = cfg["image"]
    return Intrinsics.from_fov(img["width"], img["height"], img["fov"])


def initial_pose_of(cfg):
    tr = cfg["trajectory"]
    return look_at(tr["eye"], tr["target"], tr["up"])


def scene_of(cfg):
    from .scenesim import SceneSpec, make_dynamic_scene, make_static_scene

    sc = cfg["scene"]
    if sc["path"] is not None:
        return SceneSpec.from_dict(io.read_json(sc["path"]))
    if sc["kind"] == "static":
        return make_static_scene(sc["n_points"], seed=cfg["seed"])
    return make_dynamic_scene(seed=cfg["seed"], n_background=sc["n_points"])


# -------------------------------------------------------------------- manifest


def _record(out, cfg, stage, paths):
    out = Path(out)
    mpath = out / "manifest.json"
    h = config_hash(cfg)
    manifest = None
    if mpath.exists():
        manifest = io.read_json(mpath)
        if manifest.get("config_hash") != h:
            manifest = None
    if manifest is None:
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "config": {k: v for k, v in cfg.items() if k != "out"},
            "config_hash": h,
            "seed": cfg["seed"],
            "stages": {},
        }
    manifest["stages"][stage] = {
        str(Path(p).relative_to(out)): io.sha256_file(p) for p in sorted(paths)
    }
    io.write_json(mpath, manifest)


def _stage_dir(cfg, stage):
    d = Path(cfg["out"]) / stage
    d.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------------- stages


def stage_classify(cfg, image_path=None):
    """Choose the motion: explicit override, else the classifier, else the fallback."""
    from .fewshot import classify_motion, load_checkpoint, softmax, extract_features, forward_head

    d = _stage_dir(cfg, "classify")
    image_path = image_path or cfg["input_image"]
    result = {}
    if cfg["motion"] is not None:
        m = MotionType.parse(cfg["motion"])
        result = {"motion": m.slug, "index": int(m), "source": "override", "confidence": 1.0}
    elif cfg["classifier"] is not None:
        head, _ = load_checkpoint(cfg["classifier"])
        if image_path is not None:
            image = io.read_png(image_path)
        else:
            from .scenesim import render_frame, scene_state_at

            image = render_frame(scene_state_at(scene_of(cfg), 0, cfg["fps"]), initial_pose_of(cfg), intrinsics_of(cfg)).rgb
        m, conf = classify_motion(head, image)
        probs = softmax(forward_head(head, extract_features(image)))
        result = {
            "motion": m.slug,
            "index": int(m),
            "source": "classifier",
            "confidence": conf,
            "probabilities": {k.slug: float(p) for k, p in zip(MotionType, probs)},
        }
    else:
        m = FALLBACK_MOTION
        result = {"motion": m.slug, "index": int(m), "source": "default", "confidence": None}
    path = d / "motion.json"
    io.write_json(path, result)
    _record(cfg["out"], cfg, "classify", [path])
    return result


def stage_train_classifier(cfg, manifest_path):
    from .fewshot import HandcraftedFeatures, MotionClassifier, load_manifest, save_checkpoint

    d = _stage_dir(cfg, "classify")
    images, labels = load_manifest(manifest_path)
    X = HandcraftedFeatures().transform(images)
    clf = MotionClassifier(random_state=cfg["seed"]).fit(X, labels)
    ck = d / "classifier.json"
    save_checkpoint(ck, clf.head_, seed=cfg["seed"])
    hist = d / "classifier_history.json"
    io.write_json(hist, clf.history_)
    _record(cfg["out"], cfg, "train-classifier", [ck, hist])
    return ck


def stage_trajectory(cfg, motion=None):
    d = _stage_dir(cfg, "trajectory")
    if motion is None:
        mfile = Path(cfg["out"]) / "classify" / "motion.json"
        motion = io.read_json(mfile)["motion"] if mfile.exists() else (cfg["motion"] or FALLBACK_MOTION)
    tr = cfg["trajectory"]
    params = TrajectoryParams(tr["frames"], initial_pose_of(cfg), tr["pivot"], tr["magnitude"])
    poses = generate_trajectory(motion, params)
    path = d / "poses.json"
    path.write_text(trajectory_to_json(poses) + "\n")
    _record(cfg["out"], cfg, "trajectory", [path])
    return poses


def stage_simulate(cfg, poses_path=None):
    from .scenesim import flow_gt, render_sequence

    d = _stage_dir(cfg, "simulate")
    poses_path = Path(poses_path or Path(cfg["out"]) / "trajectory" / "poses.json")
    poses = trajectory_from_json(poses_path.read_text())
    spec = scene_of(cfg)
    K = intrinsics_of(cfg)
    fps = cfg["fps"]
    written = [d / "scene.json"]
    io.write_json(d / "scene.json", spec.to_dict())
    for f in render_sequence(spec, poses, K, fps):
        stem = f"frame_{f.time:04d}"
        io.save_frame(d, f, stem)
        written += [d / f"{stem}{s}" for s in (".png", "_depth.png", ".json", ".npz")]
    for t in range(len(poses) - 1):
        fl = flow_gt(spec, poses[t], poses[t + 1], K, t, fps)
        p = d / f"flow_{t:04d}.npz"
        io.savez_stable(p, flow=fl.flow, valid=fl.valid)
        written.append(p)
    _record(cfg["out"], cfg, "simulate", written)
    return d


def _split(frames, stride):
    if stride <= 1 or len(frames) == 1:
        return frames, []
    train = [f for f in frames if f.time % stride == 0]
    held = [f for f in frames if f.time % stride != 0]
    return train, held


def stage_reconstruct(cfg, frames_dir=None):
    from .recon import FeatureField, ego_flow, field_train, fuse, resolve_unknown, segment_dynamic
    from .scenesim import FlowField

    d = _stage_dir(cfg, "reconstruct")
    frames_dir = Path(frames_dir or Path(cfg["out"]) / "simulate")
    frames = io.load_frames(frames_dir)
    if not frames:
        raise ValueError(f"no frames found in {frames_dir}")
    train, _ = _split(frames, cfg["holdout_stride"])
    by_time = {f.time: f for f in frames}
    masks, written, segmented = [], [], []
    for f in train:
        flow_path = frames_dir / f"flow_{f.time:04d}.npz"
        if not (flow_path.exists() and f.time + 1 in by_time):
            continue
        z = np.load(flow_path)
        obs = FlowField(z["flow"], z["valid"])
        ego = ego_flow(f.depth, f.pose, by_time[f.time + 1].pose, f.intrinsics)
        m = resolve_unknown(segment_dynamic(obs, ego, cfg["tau"]).labels)
        segmented.append(f)
        masks.append(m)
        p = d / f"mask_{f.time:04d}.png"
        io.write_mask_png(p, m)
        written.append(p)
    if not segmented:
        # no flow to judge motion by: everything is taken as static
        segmented = train
        masks = [np.zeros(f.depth.shape, bool) for f in train]
    train = segmented
    fused = fuse(train, masks)
    for cloud, f in zip(fused.frames, train):
        p = d / f"cloud_{f.time:04d}.ply"
        io.write_ply(p, cloud)
        written.append(p)
    for name, cloud in (("static", fused.static), ("dynamic", fused.dynamic)):
        p = d / f"{name}.ply"
        io.write_ply(p, cloud)
        written.append(p)

    fc = cfg["field"]
    poses = [by_time[t].pose for t in sorted(by_time)]
    field = FeatureField(
        epochs=fc["epochs"],
        learning_rate=fc["learning_rate"],
        batch_size=fc["batch_size"],
        random_state=cfg["seed"],
    )
    field, losses = field_train(field, fused, poses, max_points=fc["max_points"])
    p = d / "field.json"
    p.write_text(field.to_json() + "\n")
    written.append(p)
    p = d / "summary.json"
    io.write_json(
        p,
        {
            "train_frames": [f.time for f in train],
            "static_points": len(fused.static),
            "dynamic_points": len(fused.dynamic),
            "field_loss": losses,
        },
    )
    written.append(p)
    _record(cfg["out"], cfg, "reconstruct", written)
    return fused


def _ground_truth_static(cfg, frames):
    from .scenesim import SceneSpec, scene_state_at, visible_elements

    spec = SceneSpec.from_dict(io.read_json(Path(cfg["out"]) / "simulate" / "scene.json"))
    seen = []
    for f in frames:
        state = scene_state_at(spec, f.time, cfg["fps"])
        vis = visible_elements(state, f.pose, f.intrinsics)
        seen.append(vis[~state.point_dynamic[vis]])
    # static points do not move, so any frame's state locates them
    return state.points[np.unique(np.concatenate(seen))]


def stage_evaluate(cfg):
    """Re-render the fused static cloud onto held-out frames and score it."""
    from PIL import Image

    from .evaluation import chamfer, evaluate_images
    from .recon import fuse
    from .scenesim import render_frame, state_from_cloud

    d = _stage_dir(cfg, "evaluate")
    frames = io.load_frames(Path(cfg["out"]) / "simulate")
    train, held = _split(frames, cfg["holdout_stride"])
    targets = held or train
    static = io.read_ply(Path(cfg["out"]) / "reconstruct" / "static.ply")
    # PLY stores 8-bit colour, so the cloud is re-fused from the training
    # frames and the stage's masks to keep exact colours
    masks_dir = Path(cfg["out"]) / "reconstruct"
    summary = io.read_json(masks_dir / "summary.json")
    train = [f for f in train if f.time in set(summary["train_frames"])]
    dyn_masks = []
    for f in train:
        mp = masks_dir / f"mask_{f.time:04d}.png"
        dyn_masks.append(np.asarray(Image.open(mp)) > 0 if mp.exists() else np.zeros(f.depth.shape, bool))
    fused = fuse(train, dyn_masks)
    state = state_from_cloud(fused.static)
    rendered, masks = [], []
    for f in targets:
        r = render_frame(state, f.pose, f.intrinsics)
        rendered.append(r.rgb)
        masks.append(r.depth.valid & f.depth.valid & ~f.dynamic)
    report = evaluate_images([f.rgb for f in targets], rendered, masks)
    for row, f in zip(report.per_frame, targets):
        row["frame"] = f.time
    report.chamfer = chamfer(static, _ground_truth_static(cfg, train))
    p = d / "report.json"
    p.write_text(report.to_json())
    _record(cfg["out"], cfg, "evaluate", [p])
    return report


def evaluate_paths(a, b):
    """Compare two frame directories (PSNR/SSIM) or two PLY files (Chamfer)."""
    from .evaluation import MetricReport, chamfer, evaluate_images

    a, b = Path(a), Path(b)
    if a.suffix == ".ply" and b.suffix == ".ply":
        return MetricReport(chamfer=chamfer(io.read_ply(a), io.read_ply(b)))
    fa, fb = io.load_frames(a), io.load_frames(b)
    if len(fa) != len(fb) or not fa:
        raise ValueError("frame sets must be non-empty and of equal length")
    return evaluate_images([f.rgb for f in fa], [f.rgb for f in fb])


def run_pipeline(cfg):
    stage_classify(cfg)
    stage_trajectory(cfg)
    stage_simulate(cfg)
    stage_reconstruct(cfg)
    return stage_evaluate(cfg)


# ------------------------------------------------------------------------- cli


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="global random seed")
    common.add_argument("--motion", help="force a motion label, e.g. orbit or zoom-in")
    common.add_argument("--frames", type=int, help="trajectory length T")
    common.add_argument("--out", help="output directory")

    parser = argparse.ArgumentParser(prog="pose4d", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("classify", parents=[common], help="image -> motion label JSON")
    p.add_argument("image", nargs="?", help="PNG image (default: render the scene's first view)")
    p.add_argument("--model", help="classifier checkpoint JSON")
    p = sub.add_parser("train-classifier", parents=[common], help="manifest -> classifier checkpoint")
    p.add_argument("manifest", help="JSON list of {image_path, motion_label}")
    sub.add_parser("trajectory", parents=[common], help="motion label -> pose JSON")
    p = sub.add_parser("simulate", parents=[common], help="scene + poses -> frames")
    p.add_argument("--poses", help="trajectory JSON (default: <out>/trajectory/poses.json)")
    p = sub.add_parser("reconstruct", parents=[common], help="frames -> PLYs, masks, field")
    p.add_argument("--frames-dir", help="frames directory (default: <out>/simulate)")
    p = sub.add_parser("evaluate", parents=[common], help="score held-out views, or compare two inputs")
    p.add_argument("inputs", nargs="*", help="two frame directories or two PLY files")
    sub.add_parser("pipeline", parents=[common], help="run every stage end to end")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        overrides = {"seed": args.seed, "motion": args.motion, "frames": args.frames, "out": args.out}
        if getattr(args, "model", None):
            overrides["classifier"] = args.model
        cfg = load_config(args.config, overrides)
        if args.command == "evaluate" and len(args.inputs) not in (0, 2):
            raise ConfigInvalid("evaluate takes zero or two inputs")
        if args.command == "classify" and args.image and not Path(args.image).exists():
            raise ConfigInvalid(f"image {args.image} does not exist")
    except ConfigInvalid as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2

    stage = args.command
    try:
        if stage == "classify":
            print(json.dumps(stage_classify(cfg, args.image), sort_keys=True))
        elif stage == "train-classifier":
            print(stage_train_classifier(cfg, args.manifest))
        elif stage == "trajectory":
            poses = stage_trajectory(cfg, cfg["motion"])
            print(trajectory_to_json(poses))
        elif stage == "simulate":
            stage_simulate(cfg, args.poses)
        elif stage == "reconstruct":
            stage_reconstruct(cfg, args.frames_dir)
        elif stage == "evaluate":
            if args.inputs:
                report = evaluate_paths(*args.inputs)
                d = _stage_dir(cfg, "evaluate")
                (d / "report.json").write_text(report.to_json())
                _record(cfg["out"], cfg, "evaluate", [d / "report.json"])
            else:
                report = stage_evaluate(cfg)
            print(report.to_json(), end="")
        elif stage == "pipeline":
            for name, fn in (
                ("classify", stage_classify),
                ("trajectory", stage_trajectory),
                ("simulate", stage_simulate),
                ("reconstruct", stage_reconstruct),
                ("evaluate", stage_evaluate),
            ):
                stage = name
                result = fn(cfg)
            print(result.to_json(), end="")
    except Exception as e:  # noqa: BLE001 - every failure maps to exit 1
        err = StageFailed(stage, f"{type(e).__name__}: {e}")
        print(str(err), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
