"""Dense multiscale features: pyramid, stitching, one forward pass, unstitching.

The pyramid levels of an image are packed into a single plane separated by
zero gutters, the net runs once over that plane, and each tap's activation
map is cut back into per-scale tiles.  :func:`per_pixel_features` resizes the
tiles to the image size and concatenates them into an ``(H, W, D)`` field,
ordered tap-major then scale-minor.
"""

import math
from dataclasses import dataclass

import numpy as np

from .convnet import forward_taps
from .errors import ContractError, ShapeError
from .imagecore import as_plane, resize_bilinear


@dataclass(frozen=True)
class PyramidLayout:
    """Where each plane went in the stitched plane.

    ``placements[i]`` is ``(row, col, h, w)`` for the i-th input plane in image
    pixels.  Offsets are multiples of ``align`` so they divide evenly by any tap
    stride that divides ``align``.
    """

    placements: tuple
    gutter: int
    stitched_dims: tuple
    align: int = 1
    scales: tuple = ()

    def at_stride(self, stride):
        """Placements converted to a tap grid: offsets divided, extents ceiling-divided."""
        out = []
        for r, c, h, w in self.placements:
            if r % stride or c % stride:
                raise ContractError(
                    f"tile offset ({r}, {c}) is not a multiple of tap stride {stride}"
                )
            out.append((r // stride, c // stride, -(-h // stride), -(-w // stride)))
        return out


def _align_up(v, a):
    return -(-v // a) * a


def scaled_size(h, w, scale):
    return int(round(scale * h)), int(round(scale * w))


def build_pyramid(image, scales):
    """Bilinear resamplings of ``image``, one per scale, of size ``round(s*H) x round(s*W)``."""
    img = as_plane(image)
    h, w = img.shape[:2]
    levels = []
    for s in scales:
        if not s > 0:
            raise ContractError(f"scale must be positive, got {s}")
        sh, sw = scaled_size(h, w, s)
        if sh < 1 or sw < 1:
            raise ContractError(f"scale {s} reduces {h}x{w} to {sh}x{sw}")
        levels.append(resize_bilinear(img, sh, sw))
    return levels


def stitch(planes, gutter=0, align=1, max_width=None):
    """Shelf-pack ``planes`` into one zero-filled plane.

    Tiles go left to right in descending height; a new shelf starts when the
    next tile would cross ``max_width`` (default: twice the widest tile plus
    one gutter).  Consecutive tiles and shelves are separated by at least
    ``gutter`` pixels, and every offset is rounded up to a multiple of ``align``.
    """
    planes = [as_plane(p) for p in planes]
    if not planes:
        raise ContractError("nothing to stitch")
    channels = planes[0].shape[2]
    if any(p.shape[2] != channels for p in planes):
        raise ContractError("all planes must share a channel count")
    if gutter < 0 or align < 1:
        raise ContractError("gutter must be >= 0 and align >= 1")
    if max_width is None:
        max_width = 2 * max(p.shape[1] for p in planes) + gutter
    order = sorted(range(len(planes)), key=lambda i: (-planes[i].shape[0], i))
    placements = [None] * len(planes)
    x = y = shelf_h = 0
    for i in order:
        h, w = planes[i].shape[:2]
        if x > 0 and x + w > max_width:
            y = _align_up(y + shelf_h + gutter, align)
            x = shelf_h = 0
        placements[i] = (y, x, h, w)
        x = _align_up(x + w + gutter, align)
        shelf_h = max(shelf_h, h)
    height = max(r + h for r, _, h, _ in placements)
    width = max(c + w for _, c, _, w in placements)
    out = np.zeros((height, width, channels))
    for p, (r, c, h, w) in zip(planes, placements):
        out[r : r + h, c : c + w] = p
    return out, PyramidLayout(tuple(placements), gutter, (height, width), align)


def unstitch(feature_plane, layout, tap_stride=1):
    """Cut per-tile maps out of a stitched activation plane at ``tap_stride``."""
    fp = as_plane(feature_plane)
    H, W = layout.stitched_dims
    expect = (-(-H // tap_stride), -(-W // tap_stride))
    if fp.shape[:2] != expect:
        raise ShapeError(
            f"feature plane is {fp.shape[:2]}, layout at stride {tap_stride} expects {expect}"
        )
    return [fp[r : r + h, c : c + w].copy() for r, c, h, w in layout.at_stride(tap_stride)]


def default_gutter(net, taps=None):
    """Receptive-field radius of the deepest selected tap, rounded up to the coarsest stride."""
    taps = list(net.tap_names if taps is None else taps)
    strides = net.tap_strides()
    align = math.lcm(*(strides[t] for t in taps))
    radius = max(net.receptive_radius(t) for t in taps)
    return _align_up(radius, align), align


def multiscale_tap_maps(image, net, weights, taps=None, scales=(1.0,), gutter=None, mean=None):
    """Run the net once over the stitched pyramid.

    Returns ``{(tap, scale_index): activation map at the tap's resolution}``
    and the layout used.  ``mean`` (per channel) is subtracted before
    building the pyramid, so gutters carry the mean colour.
    """
    taps = list(net.tap_names if taps is None else taps)
    if not taps:
        raise ContractError("select at least one tap")
    img = as_plane(image)
    if mean is not None:
        img = img - np.asarray(mean, dtype=np.float64)
    auto_gutter, align = default_gutter(net, taps)
    if gutter is None:
        gutter = auto_gutter
    levels = build_pyramid(img, scales)
    plane, layout = stitch(levels, gutter=gutter, align=align)
    layout = PyramidLayout(layout.placements, layout.gutter, layout.stitched_dims,
                           layout.align, tuple(scales))
    maps = {}
    for name, act, stride in forward_taps(plane, net, weights, taps):
        for si, tile in enumerate(unstitch(act, layout, stride)):
            maps[name, si] = tile
    return maps, layout


def feature_layout(net, taps=None, scales=(1.0,)):
    """``(tap, scale, channels)`` blocks in descriptor order (tap-major, scale-minor)."""
    taps = list(net.tap_names if taps is None else taps)
    ch = net.tap_channels()
    return [(t, s, ch[t]) for t in taps for s in scales]


def per_pixel_features(image, net, weights, taps=None, scales=(1.0,), gutter=None, mean=None):
    """Per-pixel descriptor field of shape ``(H, W, D)`` for ``image``.

    Each (tap, scale) activation map is bilinearly resized to the image size
    and the blocks are concatenated tap-major, scale-minor.  ``D`` is the sum
    of selected tap channels times the number of scales.
    """
    taps = list(net.tap_names if taps is None else taps)
    h, w = as_plane(image).shape[:2]
    maps, _ = multiscale_tap_maps(image, net, weights, taps, scales, gutter, mean)
    blocks = [resize_bilinear(maps[t, si], h, w) for t in taps for si in range(len(scales))]
    return np.concatenate(blocks, axis=2)
