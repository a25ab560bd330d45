"""Image and geometry metrics: masked PSNR/SSIM, sequence means, Chamfer."""

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial import cKDTree

from .exceptions import EmptyCloud, EmptyMask, ShapeMismatch, TooSmallImage

PSNR_CAP = 99.0
DATA_RANGE = 1.0
K1, K2 = 0.01, 0.03
WINDOW = 8
MIN_WINDOW_COVERAGE = 0.75


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"images differ in shape: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return a, b


def _mask(mask, shape):
    if mask is None:
        return np.ones(shape, bool)
    m = np.asarray(mask, bool)
    if m.shape != shape:
        raise ShapeMismatch(f"mask shape {m.shape} does not match image {shape}")
    return m


def psnr(a, b, mask=None):
    """PSNR in dB over masked pixels (all channels), data range 1, capped at 99."""
    a, b = _pair(a, b)
    m = _mask(mask, a.shape[:2])
    if not m.any():
        raise EmptyMask("PSNR mask selects no pixels")
    mse = float(np.mean((a[m] - b[m]) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(DATA_RANGE**2 / mse))


def ssim(a, b, mask=None):
    """Mean SSIM over 8x8 uniform windows.

    With a mask, only windows with at least 75% valid pixels count, and their
    statistics use the valid pixels alone. Multi-channel images average the
    per-channel index.
    """
    a, b = _pair(a, b)
    H, W, C = a.shape
    if H < WINDOW or W < WINDOW:
        raise TooSmallImage(f"SSIM needs at least {WINDOW}x{WINDOW} pixels")
    m = _mask(mask, (H, W)).astype(np.float64)
    mw = sliding_window_view(m, (WINDOW, WINDOW))  # (h, w, 8, 8)
    n = mw.sum(axis=(-1, -2))
    keep = n >= MIN_WINDOW_COVERAGE * WINDOW * WINDOW
    if not keep.any():
        raise EmptyMask("no SSIM window has enough valid pixels")
    mw = mw[keep][:, None]  # (k, 1, 8, 8)
    n = n[keep][:, None]
    aw = sliding_window_view(a, (WINDOW, WINDOW), axis=(0, 1))[keep]  # (k, C, 8, 8)
    bw = sliding_window_view(b, (WINDOW, WINDOW), axis=(0, 1))[keep]
    mu_a = (mw * aw).sum(axis=(-1, -2)) / n
    mu_b = (mw * bw).sum(axis=(-1, -2)) / n
    da = aw - mu_a[..., None, None]
    db = bw - mu_b[..., None, None]
    var_a = (mw * da * da).sum(axis=(-1, -2)) / n
    var_b = (mw * db * db).sum(axis=(-1, -2)) / n
    cov = (mw * da * db).sum(axis=(-1, -2)) / n
    c1 = (K1 * DATA_RANGE) ** 2
    c2 = (K2 * DATA_RANGE) ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
    return float(s.mean())


def _seq(fn, seq_a, seq_b, masks):
    seq_a, seq_b = list(seq_a), list(seq_b)
    if len(seq_a) != len(seq_b) or not seq_a:
        raise ShapeMismatch("sequences must be non-empty and of equal length")
    masks = [None] * len(seq_a) if masks is None else list(masks)
    return [fn(a, b, m) for a, b, m in zip(seq_a, seq_b, masks)]


def mpsnr(seq_a, seq_b, masks=None):
    """Per-frame mean PSNR."""
    return float(np.mean(_seq(psnr, seq_a, seq_b, masks)))


def mssim(seq_a, seq_b, masks=None):
    """Per-frame mean SSIM."""
    return float(np.mean(_seq(ssim, seq_a, seq_b, masks)))


def _points(c):
    return np.asarray(getattr(c, "points", c), dtype=np.float64).reshape(-1, 3)


def chamfer(a, b):
    """Symmetric Chamfer distance: mean of the two mean nearest-neighbour distances."""
    pa, pb = _points(a), _points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise EmptyCloud("Chamfer distance needs two non-empty clouds")
    dab = cKDTree(pb).query(pa)[0]
    dba = cKDTree(pa).query(pb)[0]
    return float(0.5 * (dab.mean() + dba.mean()))


@dataclass
class MetricReport:
    mpsnr: float = None
    mssim: float = None
    chamfer: float = None
    per_frame: list = field(default_factory=list)
    valid_pixels: int = 0

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def evaluate_images(seq_a, seq_b, masks=None):
    """Per-frame PSNR/SSIM plus their means, as a :class:`MetricReport`."""
    masks = [None] * len(list(seq_a)) if masks is None else list(masks)
    rows = []
    for i, (a, b, m) in enumerate(zip(seq_a, seq_b, masks)):
        count = int(np.asarray(a).shape[0] * np.asarray(a).shape[1]) if m is None else int(np.sum(m))
        rows.append({"frame": i, "psnr": psnr(a, b, m), "ssim": ssim(a, b, m), "valid_pixels": count})
    return MetricReport(
        mpsnr=float(np.mean([r["psnr"] for r in rows])),
        mssim=float(np.mean([r["ssim"] for r in rows])),
        per_frame=rows,
        valid_pixels=sum(r["valid_pixels"] for r in rows),
    )


def rerender_report(cloud, frames):
    """Splat ``cloud`` into each frame's view and compare on pixels covered by both."""
    from .scenesim import render_frame, state_from_cloud

    state = state_from_cloud(cloud)
    rendered, masks = [], []
    for f in frames:
        r = render_frame(state, f.pose, f.intrinsics)
        rendered.append(r.rgb)
        masks.append(r.depth.valid & f.depth.valid)
    return evaluate_images([f.rgb for f in frames], rendered, masks)
