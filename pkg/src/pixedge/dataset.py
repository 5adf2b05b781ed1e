"""On-disk dataset layout and a synthetic shapes generator.

Layout under a dataset root::

    <split>/images/<id>.ppm          colour image (P6)
    <split>/gt/<id>/<k>.pgm          annotator k's boundary map (binary P5)

Splits are ``train``, ``val`` and ``test``.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import label as ndi_label

from .bench import zhang_suen
from .errors import ContractError
from .imagecore import read_image, write_binary_map, write_image

SPLITS = ("train", "val", "test")
# named substreams of the master seed
STREAM_SYNTH, STREAM_SAMPLING, STREAM_SGD, STREAM_BASELINE = 1, 2, 3, 4


def substream(seed, stream, *keys):
    """Independent generator for one named use of the master seed."""
    return np.random.default_rng([int(seed), stream, *map(int, keys)])


# ------------------------------------------------------------- layout


def image_ids(root, split):
    d = Path(root) / split / "images"
    if not d.is_dir():
        raise FileNotFoundError(f"no images directory at {d}")
    return sorted(p.stem for p in d.glob("*.ppm"))


def image_path(root, split, image_id):
    return Path(root) / split / "images" / f"{image_id}.ppm"


def load_gt(gt_dir, image_id):
    """Annotator maps for one image as boolean arrays, in file-name order."""
    d = Path(gt_dir) / str(image_id)
    files = sorted(d.glob("*.pgm"))
    if not files:
        raise FileNotFoundError(f"no ground truth maps in {d}")
    return [read_image(f)[:, :, 0] > 0.5 for f in files]


def save_gt(gt_dir, image_id, maps):
    d = Path(gt_dir) / str(image_id)
    d.mkdir(parents=True, exist_ok=True)
    for k, m in enumerate(maps):
        write_binary_map(m, d / f"{k}.pgm")


# ------------------------------------------------------------ synthesis


@dataclass(frozen=True)
class Ellipse:
    cy: float
    cx: float
    ry: float
    rx: float
    angle: float = 0.0

    def contains(self, y, x):
        c, s = np.cos(self.angle), np.sin(self.angle)
        u = (x - self.cx) * c + (y - self.cy) * s
        v = -(x - self.cx) * s + (y - self.cy) * c
        return (u / self.rx) ** 2 + (v / self.ry) ** 2 <= 1.0

    def perimeter(self):
        a, b = self.rx, self.ry
        h = ((a - b) / (a + b)) ** 2
        return np.pi * (a + b) * (1 + 3 * h / (10 + np.sqrt(4 - 3 * h)))


@dataclass(frozen=True)
class Polygon:
    vertices: tuple  # ((y, x), ...) in order

    def contains(self, y, x):
        inside = np.zeros(np.broadcast(y, x).shape, bool)
        v = self.vertices
        for (y0, x0), (y1, x1) in zip(v, v[1:] + v[:1]):
            crosses = (y0 > y) != (y1 > y)
            with np.errstate(divide="ignore", invalid="ignore"):
                xc = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
            inside ^= crosses & (x < xc)
        return inside

    def perimeter(self):
        v = np.asarray(self.vertices + self.vertices[:1], dtype=float)
        return float(np.hypot(*np.diff(v, axis=0).T).sum())


def random_shape(rng, size):
    cy, cx = rng.uniform(0.2 * size, 0.8 * size, 2)
    if rng.random() < 0.5:
        ry, rx = rng.uniform(size / 10, size / 3.5, 2)
        return Ellipse(cy, cx, ry, rx, rng.uniform(0, np.pi))
    n = int(rng.integers(3, 7))
    angles = np.sort(rng.uniform(0, 2 * np.pi, n))
    radii = rng.uniform(size / 8, size / 3, n)
    return Polygon(tuple((cy + r * np.sin(a), cx + r * np.cos(a)) for a, r in zip(angles, radii)))


def _texture(rng, size, sub):
    """Low-amplitude stripes plus noise, sampled on the supersampled grid."""
    n = size * sub
    yy, xx = (np.mgrid[0:n, 0:n] + 0.5) / sub
    th = rng.uniform(0, np.pi)
    freq = rng.uniform(0.3, 1.2)
    stripes = 0.04 * np.sin(freq * (xx * np.cos(th) + yy * np.sin(th)) + rng.uniform(0, 2 * np.pi))
    noise = np.repeat(np.repeat(rng.normal(0, 0.02, (size, size)), sub, 0), sub, 1)
    return stripes + noise


def _distinct_colour(rng, avoid, min_dist=0.3):
    for _ in range(100):
        c = rng.uniform(0.1, 0.9, 3)
        if all(np.abs(c - a).sum() >= min_dist for a in avoid):
            return c
    return c


def label_map(shapes, size, sub=1):
    """Index of the topmost shape covering each (sub)pixel centre; 0 is background."""
    n = size * sub
    yy, xx = (np.mgrid[0:n, 0:n] + 0.5) / sub - 0.5
    labels = np.zeros((n, n), np.int32)
    for k, shape in enumerate(shapes, 1):
        labels[shape.contains(yy, xx)] = k
    return labels


def boundary_from_labels(labels):
    """Pixels whose label exceeds a 4-neighbour's label (one pixel wide, on the upper region)."""
    b = np.zeros(labels.shape, bool)
    b[1:] |= labels[1:] > labels[:-1]
    b[:-1] |= labels[:-1] > labels[1:]
    b[:, 1:] |= labels[:, 1:] > labels[:, :-1]
    b[:, :-1] |= labels[:, :-1] > labels[:, 1:]
    return b


def outline(shapes, size, sub=4):
    """One-pixel outline of the pixels the continuous contours pass through.

    Region boundaries are traced on a ``sub``-times finer grid, projected to
    the pixels containing them, and thinned.
    """
    fine = boundary_from_labels(label_map(shapes, size, sub))
    crossed = fine.reshape(size, sub, size, sub).any(axis=(1, 3))
    return drop_redundant(zhang_suen(crossed))


def drop_redundant(mask):
    """Remove staircase corners so the curve is minimally 8-connected.

    Pixels are visited in raster order; one is dropped when it has at least
    two neighbours and they form a single 8-connected group, so removing it
    cannot split the curve or shorten an open end.
    """
    m = np.pad(np.asarray(mask, bool), 1)
    eight = np.ones((3, 3), int)
    for r, c in np.argwhere(m):
        nb = m[r - 1 : r + 2, c - 1 : c + 2].copy()
        nb[1, 1] = False
        if nb.sum() >= 2 and ndi_label(nb, eight)[1] == 1:
            m[r, c] = False
    return m[1:-1, 1:-1]


def shift(mask, dy, dx):
    """Translate a mask, filling with False."""
    out = np.zeros_like(mask)
    h, w = mask.shape
    out[max(dy, 0) : h + min(dy, 0), max(dx, 0) : w + min(dx, 0)] = \
        mask[max(-dy, 0) : h + min(-dy, 0), max(-dx, 0) : w + min(-dx, 0)]
    return out


def synth_image(rng, size=64, shapes=None, n_annotators=None, sub=4):
    """One synthetic sample: ``(image (H, W, 3), [annotator maps], shapes)``.

    Shapes are rendered anti-aliased by ``sub x sub`` supersampling.  The first
    annotator is the exact outline; others are copies shifted by one pixel.
    """
    if size < 16:
        raise ContractError("image size must be at least 16")
    if shapes is None:
        shapes = [random_shape(rng, size) for _ in range(int(rng.integers(1, 5)))]
    labels_hi = label_map(shapes, size, sub)
    colours = [_distinct_colour(rng, [])]
    for _ in shapes:
        colours.append(_distinct_colour(rng, colours))
    hi = np.zeros(labels_hi.shape + (3,))
    for k, colour in enumerate(colours):
        region = labels_hi == k
        tex = _texture(rng, size, sub)
        hi[region] = colour + tex[region][:, None]
    image = hi.reshape(size, sub, size, sub, 3).mean(axis=(1, 3))
    image = np.clip(image, 0.0, 1.0)
    exact = outline(shapes, size, sub)
    if n_annotators is None:
        n_annotators = int(rng.integers(1, 4))
    maps = [exact]
    jitters = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]
    for _ in range(n_annotators - 1):
        dy, dx = jitters[int(rng.integers(len(jitters)))]
        maps.append(shift(exact, dy, dx))
    return image, maps, shapes


def write_synthetic(root, n_train, n_test, size=64, seed=0, n_val=0):
    """Generate and write a synthetic dataset; returns ``{split: [ids]}``."""
    if n_train < 1 or n_test < 1 or n_val < 0:
        raise ContractError("need n_train >= 1, n_test >= 1, n_val >= 0")
    root = Path(root)
    written = {}
    for split_idx, (split, n) in enumerate(zip(SPLITS, (n_train, n_val, n_test))):
        if n == 0:
            continue
        (root / split / "images").mkdir(parents=True, exist_ok=True)
        ids = []
        for i in range(n):
            rng = substream(seed, STREAM_SYNTH, split_idx, i)
            image, maps, _ = synth_image(rng, size)
            image_id = f"{i:04d}"
            write_image(image, image_path(root, split, image_id))
            save_gt(root / split / "gt", image_id, maps)
            ids.append(image_id)
        written[split] = ids
    return written
