"""Chips, splits, derived targets, augmentation and a synthetic dataset.

Images are float arrays C x F x F in [0, 1]; masks are F x F {0, 1}.
"""
from dataclasses import dataclass, field, replace
import math
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError

TRAIN_FRACTION = 0.6838
CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass
class ChipPair:
    t1: np.ndarray
    t2: np.ndarray
    mask: np.ndarray
    distance_gt: np.ndarray = None
    boundary_gt: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t1 = np.asarray(self.t1, dtype=np.float64)
        self.t2 = np.asarray(self.t2, dtype=np.float64)
        self.mask = (np.asarray(self.mask) > 0).astype(np.uint8)
        if self.t1.ndim != 3 or self.t1.shape != self.t2.shape:
            raise ValueError(f"t1 {self.t1.shape} and t2 {self.t2.shape} must be matching C x H x W")
        if self.mask.shape != self.t1.shape[1:]:
            raise ValueError(f"mask {self.mask.shape} does not match image {self.t1.shape[1:]}")
        if self.distance_gt is None:
            self.distance_gt = gen_distance_gt(self.mask)
        if self.boundary_gt is None:
            self.boundary_gt = gen_boundary_gt(self.mask)

    @property
    def size(self):
        return self.mask.shape


# geometry of tiles ----------------------------------------------------------------------

def _axis_origins(dim, F, stride, cover_edges):
    if F > dim:
        raise ValueError(f"window {F} exceeds tile dimension {dim}")
    origins = list(range(0, dim - F + 1, stride))
    if cover_edges and origins[-1] != dim - F:
        origins.append(dim - F)
    return origins


def extract_chips(tile_w, tile_h, F, stride=None, cover_edges=False):
    """Top-left (x, y) origins of F x F windows stepping by ``stride``.

    There are floor((dim - F) / stride) + 1 origins per axis.  With
    ``cover_edges`` a final flush window is appended where the stride leaves
    a strip uncovered.
    """
    stride = F // 2 if stride is None else stride
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if F < 1:
        raise ValueError("window must be >= 1")
    xs = _axis_origins(tile_w, F, stride, cover_edges)
    ys = _axis_origins(tile_h, F, stride, cover_edges)
    return [(x, y) for y in ys for x in xs]


@dataclass(frozen=True)
class Rect:
    x: int
    y: int
    w: int
    h: int

    @property
    def area(self):
        return self.w * self.h

    def slices(self):
        return slice(self.y, self.y + self.h), slice(self.x, self.x + self.w)


def split_train_val(tile_w, tile_h, F=256, fraction=TRAIN_FRACTION):
    """Train rectangle anchored at the origin; validation is the L-shaped rest.

    Returns ``(train, val)`` where ``val`` is a list of disjoint rectangles
    (right strip over the full height, bottom strip under the train area).
    """
    if tile_w < F or tile_h < F:
        raise ValueError(f"tile {tile_w}x{tile_h} smaller than window {F}")
    tw, th = math.floor(fraction * tile_w), math.floor(fraction * tile_h)
    if tw < F or th < F:
        raise ValueError(f"train rectangle {tw}x{th} smaller than window {F}")
    train = Rect(0, 0, tw, th)
    val = [r for r in (Rect(tw, 0, tile_w - tw, tile_h), Rect(0, th, tw, tile_h - th)) if r.area]
    return train, val


# derived targets ------------------------------------------------------------------------

def gen_distance_gt(mask):
    """Distance to the nearest background pixel, scaled to 1 per connected component.

    Pixels outside the image count as background.
    """
    mask = np.asarray(mask) > 0
    out = np.zeros(mask.shape, dtype=np.float64)
    if not mask.any():
        return out
    dist = ndimage.distance_transform_edt(np.pad(mask, 1))[1:-1, 1:-1]
    labels, n = ndimage.label(mask, structure=CROSS)
    peaks = ndimage.maximum(dist, labels, index=np.arange(1, n + 1))
    scale = np.concatenate([[1.0], np.asarray(peaks, dtype=np.float64)])
    out[mask] = dist[mask] / scale[labels[mask]]
    return out


def gen_boundary_gt(mask, width=1):
    """Inner boundary of ``width`` pixels (4-neighbourhood, outside counts as 0)."""
    if width < 1:
        raise ValueError("width must be >= 1")
    mask = np.asarray(mask) > 0
    if not mask.any():
        return np.zeros(mask.shape, dtype=np.uint8)
    inner = ndimage.binary_erosion(mask, structure=CROSS, iterations=width, border_value=0)
    return (mask & ~inner).astype(np.uint8)


# augmentation ---------------------------------------------------------------------------

@dataclass
class AugmentConfig:
    p_time_reversal: float = 0.5
    p_random_identity: float = 0.5
    rotation: tuple = (0.0, 360.0)
    zoom: tuple = (0.8, 1.2)
    brightness: tuple = (0.8, 1.2)
    shadows: tuple = (1, 3)
    shadow_factor: float = 0.5
    p_geometric: float = 1.0
    p_photometric: float = 1.0

    def __post_init__(self):
        for name in ("p_time_reversal", "p_random_identity", "p_geometric", "p_photometric"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} is not a probability")
        if self.zoom[0] <= 0:
            raise ValueError("zoom must be positive")

    @classmethod
    def off(cls):
        return cls(p_time_reversal=0.0, p_random_identity=0.0, p_geometric=0.0, p_photometric=0.0)


@dataclass(frozen=True)
class Warp:
    angle: float = 0.0
    zoom: float = 1.0
    center: tuple = (0.0, 0.0)

    def matrix(self):
        """Output (row, col) -> input (row, col) affine map as (A, offset)."""
        t = math.radians(self.angle)
        c, s = math.cos(t), math.sin(t)
        A = np.array([[c, s], [-s, c]]) / self.zoom
        ctr = np.asarray(self.center, dtype=np.float64)
        return A, ctr - A @ ctr

    def is_identity(self):
        return self.angle % 360.0 == 0.0 and self.zoom == 1.0


def source_coordinates(warp, shape):
    """Input coordinates sampled by each output pixel, 2 x H x W."""
    A, off = warp.matrix()
    grid = np.indices(shape, dtype=np.float64).reshape(2, -1)
    return (A @ grid + off[:, None]).reshape(2, *shape)


def warp_plane(plane, warp, order):
    if warp.is_identity():
        return np.array(plane, copy=True)
    A, off = warp.matrix()
    return ndimage.affine_transform(plane, A, offset=off, order=order, mode="reflect")


def warp_chip(chip, warp):
    """Apply one geometric transform to every plane; targets use nearest sampling."""
    t1 = np.stack([warp_plane(p, warp, 1) for p in chip.t1])
    t2 = np.stack([warp_plane(p, warp, 1) for p in chip.t2])
    mask = warp_plane(chip.mask, warp, 0)
    return ChipPair(np.clip(t1, 0, 1), np.clip(t2, 0, 1), mask, meta=dict(chip.meta))


def polygon_mask(shape, rng, n_points=6):
    """Random convex polygon rasterised as the intersection of its hull half-planes."""
    h, w = shape
    for _ in range(10):
        pts = rng.random((n_points, 2)) * (h, w)
        try:
            hull = ConvexHull(pts)
        except QhullError:
            continue
        grid = np.indices(shape, dtype=np.float64).reshape(2, -1).T + 0.5
        inside = np.all(grid @ hull.equations[:, :2].T + hull.equations[:, 2] <= 0, axis=1)
        return inside.reshape(shape)
    return np.zeros(shape, dtype=bool)


def photometric(img, cfg, rng):
    out = img * rng.uniform(*cfg.brightness)
    lo, hi = cfg.shadows
    for _ in range(rng.integers(lo, hi + 1)):
        out = np.where(polygon_mask(img.shape[1:], rng), out * cfg.shadow_factor, out)
    return np.clip(out, 0.0, 1.0)


def time_reversal(chip):
    return replace(chip, t1=chip.t2, t2=chip.t1)


def random_identity(chip, rng):
    img = chip.t1 if rng.random() < 0.5 else chip.t2
    zero = np.zeros_like(chip.mask)
    return ChipPair(img.copy(), img.copy(), zero, meta=dict(chip.meta))


def augment(chip, cfg, rng):
    """Random geometric warp, brightness and shadows, time reversal and identity pairs."""
    if rng.random() < cfg.p_geometric:
        h, w = chip.size
        warp = Warp(rng.uniform(*cfg.rotation), rng.uniform(*cfg.zoom), (rng.uniform(0, h - 1), rng.uniform(0, w - 1)))
        chip = warp_chip(chip, warp)
    if rng.random() < cfg.p_photometric:
        chip = replace(chip, t1=photometric(chip.t1, cfg, rng), t2=photometric(chip.t2, cfg, rng))
    if rng.random() < cfg.p_time_reversal:
        chip = time_reversal(chip)
    if rng.random() < cfg.p_random_identity:
        chip = random_identity(chip, rng)
    return chip


# synthetic data -------------------------------------------------------------------------

def chip_rng(seed, index):
    """Independent stream per (seed, chip index)."""
    return np.random.default_rng([seed, index])


def rasterize_rects(rects, shape):
    out = np.zeros(shape, dtype=bool)
    for r in rects:
        out[r.slices()] = True
    return out


def _random_rects(rng, F, count):
    lo, hi = max(2, F // 10), max(3, F // 3)
    rects = []
    for _ in range(count):
        w, h = rng.integers(lo, hi + 1, size=2)
        x, y = rng.integers(0, F - w + 1), rng.integers(0, F - h + 1)
        rects.append(Rect(int(x), int(y), int(w), int(h)))
    return rects


def _paint(img, rects, rng):
    for r in rects:
        colour = rng.uniform(0.45, 1.0, size=(img.shape[0], 1, 1))
        ys, xs = r.slices()
        texture = 1.0 + 0.05 * rng.standard_normal((1, r.h, r.w))
        img[:, ys, xs] = colour * texture
    return img


def synth_chip(F, rng, channels=3, buildings=(2, 5), added=(0, 2), removed=(0, 2)):
    base = _random_rects(rng, F, rng.integers(buildings[0], buildings[1] + 1))
    n_rem = min(len(base), int(rng.integers(removed[0], removed[1] + 1)))
    gone = set(rng.choice(len(base), size=n_rem, replace=False).tolist()) if n_rem else set()
    new = _random_rects(rng, F, rng.integers(added[0], added[1] + 1))
    rects1 = base
    rects2 = [r for i, r in enumerate(base) if i not in gone] + new

    background = ndimage.uniform_filter(rng.random((channels, F, F)), size=(1, 5, 5)) * 0.35
    roofs = np.zeros((channels, F, F))
    _paint(roofs, base + new, rng)
    t1, t2 = background.copy(), background + 0.02 * rng.standard_normal(background.shape)
    fp1, fp2 = rasterize_rects(rects1, (F, F)), rasterize_rects(rects2, (F, F))
    # paint kept buildings in both dates, removed ones only in t1, added only in t2
    t1[:, fp1] = roofs[:, fp1]
    t2[:, fp2] = roofs[:, fp2]
    mask = fp1 ^ fp2
    meta = {"rects1": rects1, "rects2": rects2}
    return ChipPair(np.clip(t1, 0, 1), np.clip(t2, 0, 1), mask, meta=meta)


def synth_dataset(n, F=64, seed=0, channels=3, **kwargs):
    """Deterministic toy change pairs: rectangular buildings appear or vanish on noise."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [synth_chip(F, chip_rng(seed, i), channels, **kwargs) for i in range(n)]


# batching and disk layout ---------------------------------------------------------------

def stack_batch(chips):
    """Stack chips into network inputs and multitask targets."""
    mask = np.stack([c.mask for c in chips]).astype(np.float64)[:, None]
    return {
        "t1": np.stack([c.t1 for c in chips]),
        "t2": np.stack([c.t2 for c in chips]),
        "segmentation": np.concatenate([1.0 - mask, mask], axis=1),
        "boundary": np.stack([c.boundary_gt for c in chips]).astype(np.float64)[:, None],
        "distance": np.stack([c.distance_gt for c in chips])[:, None],
    }


def iterate_batches(chips, batch_size, rng=None, augment_cfg=None):
    order = np.arange(len(chips)) if rng is None else rng.permutation(len(chips))
    for start in range(0, len(chips), batch_size):
        batch = [chips[i] for i in order[start : start + batch_size]]
        if augment_cfg is not None:
            batch = [augment(c, augment_cfg, rng) for c in batch]
        yield stack_batch(batch)


def _to_uint8(img):
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def read_image(path):
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def read_mask(path):
    from PIL import Image

    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.uint8)


def write_image(path, img):
    from PIL import Image

    img = np.asarray(img)
    if img.ndim == 3:
        img = img.transpose(1, 2, 0)
        if img.shape[2] == 1:
            img = img[..., 0]
    Image.fromarray(_to_uint8(img)).save(path)


def write_mask(path, mask):
    from PIL import Image

    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)


def write_split(root, split, chips, prefix="chip"):
    """Write chips as root/split/{A,B,label}/<name>.png; returns the name stems."""
    base = Path(root) / split
    for sub in ("A", "B", "label"):
        (base / sub).mkdir(parents=True, exist_ok=True)
    names = []
    for i, c in enumerate(chips):
        name = f"{prefix}_{i:05d}"
        write_image(base / "A" / f"{name}.png", c.t1)
        write_image(base / "B" / f"{name}.png", c.t2)
        write_mask(base / "label" / f"{name}.png", c.mask)
        names.append(name)
    return names


def read_split(root, split, names=None):
    base = Path(root) / split
    if not (base / "A").is_dir():
        raise FileNotFoundError(f"no A/ directory under {base}")
    if names is None:
        manifest = base / "manifest.txt"
        if manifest.exists():
            names = [s.strip() for s in manifest.read_text().splitlines() if s.strip()]
        else:
            names = sorted(p.stem for p in (base / "A").glob("*.png"))
    chips = []
    for name in names:
        t1, t2 = read_image(base / "A" / f"{name}.png"), read_image(base / "B" / f"{name}.png")
        chips.append(ChipPair(t1, t2, read_mask(base / "label" / f"{name}.png"), meta={"name": name}))
    return chips


def chip_tile(img1, img2, label, F=256, stride=None, cover_edges=False):
    """Cut co-registered C x H x W rasters and an H x W label into chips."""
    img1, img2 = np.asarray(img1), np.asarray(img2)
    if img1.shape != img2.shape or img1.shape[1:] != np.asarray(label).shape:
        raise ValueError("rasters and label must be co-registered")
    h, w = img1.shape[1:]
    chips = []
    for x, y in extract_chips(w, h, F, stride, cover_edges):
        win = (slice(y, y + F), slice(x, x + F))
        chips.append(ChipPair(img1[(slice(None),) + win], img2[(slice(None),) + win], np.asarray(label)[win],
                              meta={"origin": (x, y)}))
    return chips
