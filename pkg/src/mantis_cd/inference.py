"""Sliding-window raster inference, checkpoint ensembles, confusion maps and the loss landscape."""
from dataclasses import dataclass
import io

import numpy as np

from .ftnmt import DEFAULT_SMOOTH, ftnmt_avg_numpy
from .pipeline import extract_chips
from .trainer import confusion_counts

TN, TP, FP, FN = 0, 1, 2, 3
DEFAULT_PALETTE = {TN: (0, 0, 0), TP: (255, 255, 255), FP: (255, 0, 0), FN: (0, 0, 255)}


@dataclass
class InferenceConfig:
    window: int = 256
    stride: int = 64
    threshold: float = 0.5
    batch_size: int = 4

    def __post_init__(self):
        if not 1 <= self.stride <= self.window:
            raise ValueError(f"stride {self.stride} must lie in [1, {self.window}]")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def window_origins(h, w, F, stride):
    """(x, y) origins of the windows laid on an unpadded H x W raster."""
    return extract_chips(w, h, F, stride)


def padding(dim, F, stride):
    """(before, after) reflect padding so windows tile the padded axis exactly.

    Each side gets F - stride, so border pixels are seen by as many windows
    as interior ones; the far side gets whatever extra makes the last window
    flush with the edge.
    """
    before = F - stride
    total = dim + 2 * before
    if total < F:
        raise ValueError(f"raster side {dim} too small for window {F} at stride {stride}")
    extra = (-(total - F)) % stride
    return before, before + extra


def _predict_fn(model):
    if hasattr(model, "predict"):
        return model.predict
    if callable(model):
        return model
    raise TypeError("model must be callable or provide predict(img1, img2)")


def _check_channels(model, c):
    cfg = getattr(model, "cfg", None)
    if cfg is not None and getattr(cfg, "in_channels", c) != c:
        raise ValueError(f"raster has {c} channels, model expects {cfg.in_channels}")


def sliding_inference(model, raster1, raster2, cfg=None):
    """Per-pixel mean change probability over all covering windows, H x W.

    ``model`` maps two B x C x F x F batches to B x F x F probabilities,
    either through ``model.predict`` or by being called directly.
    """
    cfg = cfg or InferenceConfig()
    r1 = np.asarray(raster1, dtype=np.float64)
    r2 = np.asarray(raster2, dtype=np.float64)
    if r1.shape != r2.shape or r1.ndim != 3:
        raise ValueError(f"rasters must be matching C x H x W arrays, got {r1.shape} and {r2.shape}")
    c, h, w = r1.shape
    _check_channels(model, c)
    F, s = cfg.window, cfg.stride
    (top, bottom), (left, right) = padding(h, F, s), padding(w, F, s)
    if min(h, w) < 2 and (top or bottom or left or right):
        raise ValueError("reflect padding needs rasters at least 2 pixels wide")
    pad = ((0, 0), (top, bottom), (left, right))
    p1, p2 = np.pad(r1, pad, mode="reflect"), np.pad(r2, pad, mode="reflect")
    ph, pw = p1.shape[1:]
    total = np.zeros((ph, pw))
    count = np.zeros((ph, pw))
    predict = _predict_fn(model)
    origins = extract_chips(pw, ph, F, s)
    for i in range(0, len(origins), cfg.batch_size):
        chunk = origins[i : i + cfg.batch_size]
        a = np.stack([p1[:, y : y + F, x : x + F] for x, y in chunk])
        b = np.stack([p2[:, y : y + F, x : x + F] for x, y in chunk])
        prob = np.asarray(predict(a, b), dtype=np.float64).reshape(len(chunk), F, F)
        for (x, y), pr in zip(chunk, prob):
            total[y : y + F, x : x + F] += pr
            count[y : y + F, x : x + F] += 1.0
    assert count.min() >= 1, "every pixel must be covered"
    return (total / count)[top : top + h, left : left + w]


def _signature(model):
    cfg = getattr(model, "cfg", None)
    if cfg is None:
        return None
    return (getattr(cfg, "in_channels", None), getattr(cfg, "num_classes", None))


def ensemble_inference(models, raster1, raster2, cfg=None):
    """Arithmetic mean of the sliding-window maps of every model."""
    models = list(models)
    if not models:
        raise ValueError("need at least one model")
    sigs = {_signature(m) for m in models} - {None}
    if len(sigs) > 1:
        raise ValueError(f"incompatible model configs: {sorted(sigs)}")
    acc = None
    for m in models:
        out = sliding_inference(m, raster1, raster2, cfg)
        acc = out if acc is None else acc + out
    return acc / len(models)


def confusion_classes(pred_mask, gt_mask):
    """Per-pixel class code: 0 tn, 1 tp, 2 fp, 3 fn."""
    pred = np.asarray(pred_mask).astype(bool)
    gt = np.asarray(gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    codes = np.full(pred.shape, TN, dtype=np.uint8)
    codes[pred & gt] = TP
    codes[pred & ~gt] = FP
    codes[~pred & gt] = FN
    return codes


def confusion_map(pred_mask, gt_mask, palette=None):
    """H x W x 3 uint8 colour image of the confusion classes."""
    palette = {**DEFAULT_PALETTE, **(palette or {})}
    lut = np.array([palette[k] for k in (TN, TP, FP, FN)], dtype=np.uint8)
    return lut[confusion_classes(pred_mask, gt_mask)]


def check_confusion_consistency(pred_mask, gt_mask):
    """Class histogram of the map agrees with the metric counts."""
    codes = confusion_classes(pred_mask, gt_mask)
    tp, tn, fp, fn = confusion_counts(pred_mask, gt_mask)
    hist = np.bincount(codes.ravel(), minlength=4)
    return (hist[TN], hist[TP], hist[FP], hist[FN]) == (tn, tp, fp, fn)


# loss landscape -------------------------------------------------------------------------

def landscape_grid(l=(0.4, 0.6), depths=(0, 3, 5), grid_n=101, smooth=DEFAULT_SMOOTH):
    """<FT>^d on a grid_n x grid_n grid of p over the unit square.

    Returns ``(axis, values)`` with values shaped (len(depths), grid_n, grid_n)
    indexed as [depth, ix, iy].
    """
    l = np.asarray(l, dtype=np.float64)
    if l.shape != (2,) or l.min() < 0 or l.max() > 1:
        raise ValueError("l must be a 2-vector in [0, 1]")
    if grid_n < 2:
        raise ValueError("grid_n must be >= 2")
    axis = np.linspace(0.0, 1.0, grid_n)
    px, py = np.meshgrid(axis, axis, indexing="ij")
    p = np.stack([px, py], axis=-1)
    lb = np.broadcast_to(l, p.shape)
    values = np.stack([ftnmt_avg_numpy(p, lb, d, axis=-1, smooth=smooth) for d in depths])
    return axis, values


def landscape_emit(l=(0.4, 0.6), depths=(0, 3, 5), grid_n=101, smooth=DEFAULT_SMOOTH):
    """CSV text with one row per (grid point, depth): p_x, p_y, d, ftnmt."""
    axis, values = landscape_grid(l, depths, grid_n, smooth)
    buf = io.StringIO()
    buf.write("p_x,p_y,d,ftnmt\n")
    for k, d in enumerate(depths):
        for i, x in enumerate(axis):
            for j, y in enumerate(axis):
                buf.write(f"{x:.10g},{y:.10g},{d},{values[k, i, j]:.17g}\n")
    return buf.getvalue()


def parse_landscape(text):
    """Inverse of :func:`landscape_emit`: {d: (axis, grid)}."""
    rows = np.loadtxt(io.StringIO(text), delimiter=",", skiprows=1, ndmin=2)
    out = {}
    for d in np.unique(rows[:, 2]):
        sel = rows[rows[:, 2] == d]
        axis = np.unique(sel[:, 0])
        n = len(axis)
        grid = np.empty((n, n))
        ix = np.searchsorted(axis, sel[:, 0])
        iy = np.searchsorted(axis, sel[:, 1])
        grid[ix, iy] = sel[:, 3]
        out[int(d)] = (axis, grid)
    return out


def mean_gradient_near(axis, grid, l, radius=0.05):
    """Mean |grad| of a landscape over grid points within ``radius`` of ``l``."""
    h = axis[1] - axis[0]
    gx, gy = np.gradient(grid, h, h)
    px, py = np.meshgrid(axis, axis, indexing="ij")
    near = np.hypot(px - l[0], py - l[1]) <= radius + 1e-12
    return float(np.hypot(gx, gy)[near].mean())
