"""
Dense per-pixel features from a stitched pyramid
================================================

A convolutional net shrinks its input: the first tap of the AlexNet layout
sees every fourth pixel and the fifth every sixteenth.  To give each pixel a
descriptor we run the net once, resize every tap's activation map back to
the image size and stack them.
"""

import numpy as np

from pixedge import convnet, densefeat
from pixedge.dataset import synth_image

net = convnet.alexnet_spec()
weights = convnet.filterbank_weights(net, seed=0)

# Strides and channel counts of the five taps.
for tap in net.tap_names:
    print(f"{tap}: stride {net.tap_strides()[tap]:2d}, {net.tap_channels()[tap]:3d} channels, "
          f"receptive field {net.receptive_field(tap)} px")

image, gts, shapes = synth_image(np.random.default_rng(3), size=64)

# Several scales share one forward pass.  Tiles are packed into one canvas,
# separated by a gutter as wide as the deepest receptive-field radius.
maps, layout = densefeat.multiscale_tap_maps(image, net, weights, scales=(1.0, 0.5))
print("stitched canvas", layout.stitched_dims, "gutter", layout.gutter)
for (tap, si), m in sorted(maps.items()):
    print(f"  {tap} at scale {layout.scales[si]}: {m.shape}")

# The field used for training: every pixel gets 1376 numbers.
field = densefeat.per_pixel_features(image, net, weights)
print("feature field", field.shape)

# Pixels on a boundary look different from pixels inside a region.
on = field[gts[0]].mean(axis=0)
off = field[~gts[0]].mean(axis=0)
print("mean |difference| between boundary and interior descriptors: %.3f" % np.abs(on - off).mean())
