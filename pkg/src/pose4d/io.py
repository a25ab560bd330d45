"""Disk formats: ASCII PLY, PNG frames with 16-bit depth, JSON helpers."""

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import DepthMap, Intrinsics, PointCloud, Pose

DEPTH_UNIT = 1e-4  # metres per 16-bit step unless the frame needs a coarser unit


def dumps(obj):
    """Canonical JSON (sorted keys, fixed separators) so outputs are byte-stable."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path, obj):
    Path(path).write_text(dumps(obj))


def read_json(path):
    return json.loads(Path(path).read_text())


def savez_stable(path, **arrays):
    """Like ``np.savez`` but with fixed zip timestamps, so bytes are reproducible."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_ply(path, cloud):
    """Write ``x y z red green blue`` vertices; colours are scaled to 0-255."""
    rgb = np.clip(np.rint(np.asarray(cloud.colors) * 255), 0, 255).astype(np.int64)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    lines += [
        f"{p[0]!r} {p[1]!r} {p[2]!r} {c[0]} {c[1]} {c[2]}"
        for p, c in zip(cloud.points.tolist(), rgb.tolist())
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path):
    """Read an ASCII PLY written by :func:`write_ply` (x y z red green blue)."""
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise ValueError(f"{path}: not a PLY file")
        n = 0
        props = []
        for line in f:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "format" and tok[1] != "ascii":
                raise ValueError("only ASCII PLY is supported")
            if tok[0] == "element" and tok[1] == "vertex":
                n = int(tok[2])
            elif tok[0] == "property":
                props.append(tok[-1])
            elif tok[0] == "end_header":
                break
        data = np.loadtxt(f, ndmin=2, max_rows=n) if n else np.zeros((0, len(props)))
    col = {name: i for i, name in enumerate(props)}
    pts = data[:, [col["x"], col["y"], col["z"]]]
    colors = None
    if "red" in col:
        colors = data[:, [col["red"], col["green"], col["blue"]]] / 255.0
    return PointCloud(pts, colors)


def _to_u8(rgb):
    return np.clip(np.rint(np.asarray(rgb) * 255), 0, 255).astype(np.uint8)


def write_png(path, rgb):
    Image.fromarray(_to_u8(rgb), mode="RGB").save(path, optimize=False)


def read_png(path):
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def write_mask_png(path, mask):
    Image.fromarray((np.asarray(mask, bool) * 255).astype(np.uint8), mode="L").save(path)


def write_depth_png(path, depth):
    """Store depth as 16-bit grayscale; returns the metres-per-unit scale."""
    vmax = float(depth.values[depth.valid].max()) if depth.valid.any() else 0.0
    scale = max(DEPTH_UNIT, vmax / 65535.0)
    q = np.where(depth.valid, np.rint(depth.values / scale), 0)
    # a valid sample must not collapse onto the "invalid" code 0
    q = np.where(depth.valid, np.maximum(q, 1), 0).astype(np.uint16)
    Image.fromarray(q).save(path)
    return scale


def read_depth_png(path, scale):
    q = np.asarray(Image.open(path), dtype=np.float64)
    valid = q > 0
    return DepthMap(q * scale, valid)


def save_frame(directory, frame, stem=None):
    """Write ``<stem>.png``, ``<stem>_depth.png``, ``<stem>.json`` and ``<stem>.npz``.

    The PNGs are the interchange format; the ``.npz`` keeps the exact float
    depth, sample locations and oracle labels so that stages re-run from disk
    see exactly what was rendered.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = stem or f"frame_{frame.time:04d}"
    write_png(directory / f"{stem}.png", frame.rgb)
    scale = write_depth_png(directory / f"{stem}_depth.png", frame.depth)
    savez_stable(
        directory / f"{stem}.npz",
        rgb=frame.rgb,
        depth=frame.depth.values,
        valid=frame.depth.valid,
        coords=frame.depth.coords,
        dynamic=frame.dynamic,
        primitive=frame.primitive,
    )
    write_json(
        directory / f"{stem}.json",
        {
            "time": int(frame.time),
            "pose": frame.pose.to_dict(),
            "intrinsics": frame.intrinsics.to_dict(),
            "rgb": f"{stem}.png",
            "depth": f"{stem}_depth.png",
            "depth_scale": scale,
            "exact": f"{stem}.npz",
        },
    )
    return directory / f"{stem}.json"


def load_frame(sidecar):
    from .scenesim import Frame

    sidecar = Path(sidecar)
    meta = read_json(sidecar)
    pose = Pose.from_dict(meta["pose"])
    K = Intrinsics.from_dict(meta["intrinsics"])
    exact = sidecar.parent / meta.get("exact", "")
    if meta.get("exact") and exact.exists():
        z = np.load(exact)
        depth = DepthMap(z["depth"], z["valid"], z["coords"])
        return Frame(z["rgb"], depth, pose, meta["time"], K, z["dynamic"], z["primitive"])
    rgb = read_png(sidecar.parent / meta["rgb"])
    depth = read_depth_png(sidecar.parent / meta["depth"], meta["depth_scale"])
    return Frame(rgb, depth, pose, meta["time"], K)


def load_frames(directory):
    files = sorted(Path(directory).glob("frame_*.json"))
    frames = [load_frame(p) for p in files]
    return sorted(frames, key=lambda f: f.time)
