"""
How the boundary benchmark scores a detector
============================================

A soft edge map is thresholded at 99 levels.  At each level the binary map is
thinned and its pixels are matched one-to-one to annotated boundary pixels
within a small radius.  Summing the counts over images gives a
precision/recall curve; ODS is the best F on that curve, OIS lets every
image pick its own threshold, and AP is the area under the curve.
"""

import numpy as np
from scipy.ndimage import gaussian_filter

from pixedge import bench
from pixedge.dataset import synth_image
from pixedge.nms import thin_edges

rng = np.random.default_rng(7)
images = [synth_image(rng, 64) for _ in range(8)]
tol = 1.0 / 64  # sqrt(2) px at 64x64


def report(name, maps):
    tables = [bench.evaluate_image(e, gts, tol_fraction=tol) for e, (_, gts, _) in zip(maps, images)]
    r = bench.summarize(tables)
    print(f"{name:<28} ODS {r.ods:.3f}  OIS {r.ois:.3f}  AP {r.ap:.3f}")
    return r


# One annotator's own map scores 1 against itself; the other annotators
# are shifted copies, still within the match radius.
report("first annotator", [gts[0].astype(float) for _, gts, _ in images])

# Blurring the annotation and thinning it again loses little.
blurred = [thin_edges(gaussian_filter(gts[0].astype(float), 1.0) * 2, 2.0).clip(0, 1) for _, gts, _ in images]
report("blurred, then thinned", blurred)

# Chance level: uniform noise passed through the same suppression.
noise = [thin_edges(rng.random((64, 64)), 2.0) for _ in images]
r = report("uniform noise", noise)

print("\nthreshold  precision  recall      F")
for q in r.pr_curve[::20]:
    print(f"   {q.threshold:.2f}     {q.precision:.3f}    {q.recall:.3f}  {q.f:.3f}")

# The two matchers agree on counts; the exact one also minimizes distance.
gt = images[0][1][0]
det = np.roll(gt, 1, axis=0)
for matcher in ("greedy", "exact"):
    md, mg = bench.correspond(det, gt, 1.5, matcher)
    print(f"{matcher}: matched {md.sum()} of {det.sum()} detections")
