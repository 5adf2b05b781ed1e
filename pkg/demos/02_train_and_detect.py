"""
Training an edge classifier and detecting contours
==================================================

Boundary pixels from the annotations are positives, pixels well away from
any boundary are negatives.  A linear SVM on the per-pixel features turns
into an edge detector; at test time the image is scored at its own size and
at twice its size, and the two maps are averaged.
"""

import argparse
import tempfile
from pathlib import Path

import numpy as np

from pixedge import convnet, densefeat, edgesvm
from pixedge.dataset import STREAM_SAMPLING, STREAM_SGD, STREAM_SYNTH, substream, synth_image
from pixedge.imagecore import write_edge_map, write_image
from pixedge.nms import thin_edges

parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
parser.add_argument("--out", default=None, help="where to write images (default: a temp dir)")
parser.add_argument("--n-train", type=int, default=20)
args = parser.parse_args()
out = Path(args.out or tempfile.mkdtemp(prefix="pixedge-demo-"))
out.mkdir(parents=True, exist_ok=True)

seed = 0
net = convnet.alexnet_spec()
weights = convnet.filterbank_weights(net, seed)
train = [synth_image(substream(seed, STREAM_SYNTH, 0, i), 64) for i in range(args.n_train)]
pixel_mean = np.mean([im.reshape(-1, 3).mean(axis=0) for im, _, _ in train], axis=0)

parts = []
for i, (image, gts, _) in enumerate(train):
    field = densefeat.per_pixel_features(image, net, weights, mean=pixel_mean)
    parts.append(edgesvm.sample_pixels(field, gts, 200, 2.0, substream(seed, STREAM_SAMPLING, i), i))
samples = edgesvm.TrainSet.concat([p for p in parts if p is not None])
print(f"{len(samples)} training pixels, {int((samples.labels > 0).sum())} on boundaries")

model = edgesvm.train_svm(samples, lam=1e-4, epochs=10, seed=substream(seed, STREAM_SGD),
                          taps=net.tap_names, pixel_mean=pixel_mean)
print("objective per epoch:", " ".join(f"{v:.3f}" for v in model.history))

# A fresh image the classifier has not seen.
image, gts, _ = synth_image(substream(seed, STREAM_SYNTH, 2, 0), 64)
soft = edgesvm.detect(image, net, weights, model)
thin = thin_edges(soft, 2.0)

write_image(image, out / "image.ppm")
write_edge_map(soft, out / "soft.pgm")
write_edge_map(thin, out / "thin.pgm")
write_edge_map(gts[0].astype(float), out / "annotation.pgm")

near = soft[gts[0]].mean()
far = soft[~gts[0]].mean()
print(f"mean edge strength on annotated boundaries {near:.2f}, elsewhere {far:.2f}")
print(f"NMS keeps {int((thin > 0).sum())} of {soft.size} pixels")
print("images written to", out)
