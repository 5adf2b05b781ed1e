"""Linear SVM edge classifier over per-pixel features.

Training pixels come from annotator consensus (positives) and from pixels
well away from every annotated boundary (negatives).  The classifier is fit
by Pegasos-style stochastic subgradient descent on

    lam/2 * |w|^2 + mean_i max(0, 1 - y_i * (w . x_i + b))

with step ``1 / (lam * t)`` for ``w`` and projection onto the ball
``|w| <= 1 / sqrt(lam)`` that contains the optimum.  The bias is unregularized, so it is
not stepped with the same schedule; after every epoch it is set to its exact
minimizer for the epoch-averaged weights (a 1-D piecewise-linear problem).
"""

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import distance_transform_edt

from .convnet import decode_bundle, encode_bundle
from .densefeat import multiscale_tap_maps, per_pixel_features
from .errors import ContractError, ShapeError
from .imagecore import as_map, as_plane, resize_bilinear


class SkippedImageWarning(UserWarning):
    """An image contributed no training pixels."""


@dataclass
class TrainSet:
    samples: np.ndarray
    labels: np.ndarray
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.samples.ndim != 2 or len(self.samples) != len(self.labels):
            raise ShapeError("samples must be N x D with one label per row")
        if not np.all(np.isin(self.labels, (-1.0, 1.0))):
            raise ContractError("labels must be -1 or +1")

    def __len__(self):
        return len(self.labels)

    @classmethod
    def concat(cls, parts):
        parts = [p for p in parts if p is not None]
        if not parts:
            raise ContractError("no training samples collected")
        return cls(
            np.concatenate([p.samples for p in parts]),
            np.concatenate([p.labels for p in parts]),
            [pv for p in parts for pv in p.provenance],
        )

    def select_columns(self, columns):
        return TrainSet(self.samples[:, columns], self.labels, list(self.provenance))


@dataclass
class SvmModel:
    w: np.ndarray
    b: float
    lam: float
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    score_lo: float
    score_hi: float
    taps: tuple = ()
    pixel_mean: np.ndarray = None
    scales: tuple = (1.0,)
    history: list = field(default_factory=list, compare=False, repr=False)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.feature_mean = np.asarray(self.feature_mean, dtype=np.float64)
        self.feature_scale = np.asarray(self.feature_scale, dtype=np.float64)
        if not self.score_lo < self.score_hi:
            raise ContractError("score_lo must be below score_hi")
        if np.any(self.feature_scale <= 0):
            raise ContractError("feature_scale must be strictly positive")

    @property
    def dim(self):
        return len(self.w)

    def effective(self):
        """Weights and bias acting on raw (unstandardized) features."""
        w_eff = self.w / self.feature_scale
        return w_eff, self.b - float(w_eff @ self.feature_mean)

    def raw_scores(self, x):
        x = np.asarray(x, dtype=np.float64)
        return ((x - self.feature_mean) / self.feature_scale) @ self.w + self.b

    def to_unit(self, scores):
        """Affine map sending score_lo to 0 and score_hi to 1, clamped to [0, 1]."""
        return np.clip((scores - self.score_lo) / (self.score_hi - self.score_lo), 0.0, 1.0)

    def to_records(self):
        recs = {
            "w": self.w,
            "b": np.array([self.b]),
            "lambda": np.array([self.lam]),
            "mean": self.feature_mean,
            "scale": self.feature_scale,
            "score_lo_hi": np.array([self.score_lo, self.score_hi]),
        }
        if self.pixel_mean is not None:
            recs["pixel_mean"] = np.asarray(self.pixel_mean)
        recs["scales"] = np.asarray(self.scales)
        for i, t in enumerate(self.taps):
            recs[f"tap/{t}"] = np.array([i])
        return recs

    @classmethod
    def from_records(cls, recs):
        taps = sorted((k[4:] for k in recs if k.startswith("tap/")), key=lambda t: recs[f"tap/{t}"][0])
        lo, hi = (float(v) for v in recs["score_lo_hi"])
        return cls(
            w=recs["w"], b=float(recs["b"][0]), lam=float(recs["lambda"][0]),
            feature_mean=recs["mean"], feature_scale=recs["scale"],
            score_lo=lo, score_hi=hi, taps=tuple(taps),
            pixel_mean=None if "pixel_mean" not in recs else np.asarray(recs["pixel_mean"], dtype=np.float64),
            scales=tuple(float(v) for v in recs.get("scales", [1.0])),
        )

    def to_bytes(self):
        return encode_bundle(self.to_records())

    @classmethod
    def from_bytes(cls, buf):
        return cls.from_records(decode_bundle(buf))


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(model.to_bytes())


def load_model(path):
    with open(path, "rb") as fh:
        return SvmModel.from_bytes(fh.read())


# ------------------------------------------------------------- sampling


def consensus(gts):
    """Fraction of annotators marking each pixel."""
    maps = [as_map(g) > 0.5 for g in gts]
    if not maps:
        raise ContractError("need at least one annotator map")
    return np.mean(maps, axis=0)


def sample_coords(gts, pos_cap=200, neg_ratio=2.0, rng=None, min_agreement=0.5, buffer=2.0):
    """Choose training pixel coordinates from annotator maps.

    Positives are pixels marked by at least ``min_agreement`` of the
    annotators, subsampled to ``pos_cap``.  Negatives are drawn uniformly from
    pixels farther than ``buffer`` from any annotated boundary,
    ``round(neg_ratio * positives)`` of them.  Returns ``(pos, neg)`` arrays of
    ``(row, col)``, or ``None`` when the image has no positives.
    """
    rng = np.random.default_rng(rng)
    agree = consensus(gts)
    pos = np.argwhere(agree >= min_agreement)
    if len(pos) == 0:
        return None
    if len(pos) > pos_cap:
        pos = pos[np.sort(rng.choice(len(pos), pos_cap, replace=False))]
    union = agree > 0
    far = distance_transform_edt(~union) > buffer
    cand = np.argwhere(far)
    n_neg = min(int(round(neg_ratio * len(pos))), len(cand))
    neg = cand[np.sort(rng.choice(len(cand), n_neg, replace=False))]
    return pos, neg


def sample_pixels(field, gts, pos_cap=200, neg_ratio=2.0, seed=0, image_id=0, **kw):
    """Labeled feature rows from one image; ``None`` (with a warning) if it has no boundary."""
    f = as_plane(field)
    for g in gts:
        if as_map(g).shape != f.shape[:2]:
            raise ShapeError("ground truth and feature field dims differ")
    picked = sample_coords(gts, pos_cap, neg_ratio, seed, **kw)
    if picked is None:
        warnings.warn(f"image {image_id}: no boundary pixels, skipped", SkippedImageWarning, stacklevel=2)
        return None
    pos, neg = picked
    coords = np.concatenate([pos, neg]).reshape(-1, 2)
    labels = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
    prov = [(image_id, int(r), int(c)) for r, c in coords]
    return TrainSet(f[coords[:, 0], coords[:, 1]], labels, prov)


# ------------------------------------------------------------- training


def objective(w, b, x, y, lam):
    """Regularized average hinge loss."""
    margins = y * (x @ w + b)
    return 0.5 * lam * float(w @ w) + float(np.mean(np.maximum(0.0, 1.0 - margins)))


def optimal_bias(scores, y):
    """Exact minimizer over ``b`` of ``sum max(0, 1 - y * (scores + b))``."""
    knots_pos = np.sort(1.0 - scores[y > 0])   # hinge active for b below these
    knots_neg = np.sort(-1.0 - scores[y < 0])  # hinge active for b above these
    cand = np.concatenate([knots_pos, knots_neg])
    csum_pos = np.concatenate([[0.0], np.cumsum(knots_pos)])
    csum_neg = np.concatenate([[0.0], np.cumsum(knots_neg)])
    ip = np.searchsorted(knots_pos, cand, side="right")
    n_above = len(knots_pos) - ip
    loss_pos = (csum_pos[-1] - csum_pos[ip]) - n_above * cand
    ineg = np.searchsorted(knots_neg, cand, side="left")
    loss_neg = ineg * cand - csum_neg[ineg]
    loss = loss_pos + loss_neg
    best = np.flatnonzero(loss <= loss.min() + 1e-12 * max(1.0, abs(loss.min())))
    # midpoint of the flat minimizing segment keeps the choice symmetric
    return float(0.5 * (cand[best].min() + cand[best].max()))


def standardize_stats(x):
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[~(scale > 1e-12)] = 1.0
    return mean, scale


def train_svm(train, lam=1e-4, epochs=10, seed=0, taps=(), pixel_mean=None, scales=(1.0,)):
    """Fit a linear SVM; the returned model's ``history`` holds one objective per epoch.

    Each epoch visits the samples in a fresh seeded permutation.  At the end
    of an epoch the epoch's weight iterates are averaged and the bias is set
    to its exact optimum; the model keeps the best such (w, b) seen, so the
    logged objective never increases.
    """
    y = train.labels
    if len(y) < 2 or not (np.any(y > 0) and np.any(y < 0)):
        raise ContractError("training needs at least two samples from both classes")
    if not lam > 0 or epochs < 1:
        raise ContractError("lam must be positive and epochs >= 1")
    rng = np.random.default_rng(seed)
    mean, scale = standardize_stats(train.samples)
    x = (train.samples - mean) / scale
    n, d = x.shape
    radius = 1.0 / np.sqrt(lam)
    w = np.zeros(d)
    b = 0.0
    t = 0
    best = None
    history = []
    for _ in range(epochs):
        w_sum = np.zeros(d)
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * t)
            xi, yi = x[i], y[i]
            margin = yi * (xi @ w + b)
            w *= 1.0 - eta * lam
            if margin < 1.0:
                w += (eta * yi) * xi
                norm = np.sqrt(w @ w)
                if norm > radius:
                    w *= radius / norm
            w_sum += w
        w_avg = w_sum / n
        b_avg = optimal_bias(x @ w_avg, y)
        obj = objective(w_avg, b_avg, x, y, lam)
        if best is None or obj <= best[0]:
            best = (obj, w_avg, b_avg)
        history.append(best[0])
        b = best[2]
    _, w_best, b_best = best
    # parameters are persisted as float32; keep the in-memory model identical
    w_best = w_best.astype(np.float32).astype(np.float64)
    b_best = float(np.float32(b_best))
    mean = mean.astype(np.float32).astype(np.float64)
    scale = scale.astype(np.float32).astype(np.float64)
    scores = ((train.samples - mean) / scale) @ w_best + b_best
    lo, hi = (float(np.float32(v)) for v in np.percentile(scores, [1, 99]))
    if not lo < hi:
        lo, hi = lo - 0.5, lo + 0.5
    return SvmModel(w_best, b_best, float(np.float32(lam)), mean, scale, lo, hi, tuple(taps),
                    None if pixel_mean is None else np.asarray(pixel_mean, dtype=np.float32).astype(np.float64),
                    tuple(float(np.float32(v)) for v in scales), history)


# ------------------------------------------------------------ inference


def score_field(field, model):
    """Map each pixel's descriptor to an edge strength in [0, 1]."""
    f = as_plane(field)
    if f.shape[2] != model.dim:
        raise ContractError(f"field has {f.shape[2]} dims, model expects {model.dim}")
    return model.to_unit(model.raw_scores(f))


def project_tap_maps(maps, model, h, w):
    """Unit edge map from tap activations ``{(tap, scale_index): map}``.

    Each activation block is projected onto its slice of the weights before
    resizing (resizing is linear), which avoids materializing the field.
    """
    taps = list(model.taps)
    blocks = [maps[t, si] for t in taps for si in range(len(model.scales))]
    if sum(m.shape[2] for m in blocks) != model.dim:
        raise ContractError(f"taps give {sum(m.shape[2] for m in blocks)} dims, model expects {model.dim}")
    w_eff, c = model.effective()
    raw = np.full((h, w), c)
    start = 0
    for m in blocks:
        k = m.shape[2]
        raw += resize_bilinear(m @ w_eff[start : start + k], h, w)
        start += k
    return model.to_unit(raw)


def _with_taps(model, net):
    if model.taps:
        return model
    return replace(model, taps=tuple(net.tap_names))


def edge_map(image, net, weights, model, gutter=None):
    """Single-resolution edge map, equal to ``score_field(per_pixel_features(...))``."""
    model = _with_taps(model, net)
    h, w = as_plane(image).shape[:2]
    maps, _ = multiscale_tap_maps(image, net, weights, list(model.taps), model.scales, gutter, model.pixel_mean)
    return project_tap_maps(maps, model, h, w)


def edge_maps_shared(image, net, weights, models, gutter=None):
    """Single-resolution edge maps of several models from one forward pass.

    The models must agree on scales and pixel mean; their taps may differ.
    """
    models = [_with_taps(m, net) for m in models]
    first = models[0]
    for m in models[1:]:
        if m.scales != first.scales or not np.array_equal(
                np.asarray(m.pixel_mean, dtype=float), np.asarray(first.pixel_mean, dtype=float)):
            raise ContractError("shared edge maps need models with equal scales and pixel mean")
    taps = [t for t in net.tap_names if any(t in m.taps for m in models)]
    h, w = as_plane(image).shape[:2]
    maps, _ = multiscale_tap_maps(image, net, weights, taps, first.scales, gutter, first.pixel_mean)
    return [project_tap_maps(maps, m, h, w) for m in models]


def edge_map_dense(image, net, weights, model, gutter=None):
    """Reference path for :func:`edge_map` through the full feature field."""
    taps = list(model.taps or net.tap_names)
    field = per_pixel_features(image, net, weights, taps, model.scales, gutter, model.pixel_mean)
    return score_field(field, model)


def detect_dual(image, edge_fn):
    """Average of ``edge_fn`` at the original and at double resolution.

    The double-resolution map is resized back with align-corners bilinear.
    """
    img = as_plane(image)
    h, w = img.shape[:2]
    single = as_map(edge_fn(img))
    double = as_map(edge_fn(resize_bilinear(img, 2 * h, 2 * w)))
    return 0.5 * single + 0.5 * resize_bilinear(double, h, w)


def detect(image, net, weights, model, gutter=None):
    """Dual-resolution edge map in [0, 1] at the image's own size."""
    return detect_dual(image, lambda im: edge_map(im, net, weights, model, gutter))


def detect_shared(image, net, weights, models, gutter=None):
    """:func:`detect` for several models, sharing forward passes."""
    img = as_plane(image)
    h, w = img.shape[:2]
    single = edge_maps_shared(img, net, weights, models, gutter)
    double = edge_maps_shared(resize_bilinear(img, 2 * h, 2 * w), net, weights, models, gutter)
    return [0.5 * s + 0.5 * resize_bilinear(d, h, w) for s, d in zip(single, double)]
