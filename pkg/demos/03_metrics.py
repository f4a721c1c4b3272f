"""
Scoring a segmentation
======================

Predicted cluster ids mean nothing until they are matched to classes. This
walks through the matching, frame accuracy, the segment-level F1 rule and the
segment-length distance on a two-video activity.
"""

import numpy as np

from hvq.metrics import evaluate, extract_segments, hungarian_match, paired_histograms, jsdist

gt = [np.repeat([0, 1, 2], [30, 50, 20]), np.repeat([0, 2], [40, 45])]
pred = [np.repeat([7, 4, 5], [25, 60, 15]), np.repeat([7, 4, 5], [20, 5, 60])]

# %%
# Matching is one-to-one over all frames of the activity.
mapping = hungarian_match(pred, gt)
print("cluster -> class", mapping)

# %%
# MoF counts frames; F1 counts segments that are more than half right.
report = evaluate({"demo": pred}, {"demo": gt})
m = report.activities["demo"]
print(f"MoF {m.mof:.3f}  precision {m.precision:.3f}  recall {m.recall:.3f}  F1 {m.f1:.3f}")
for i, (p, g) in enumerate(zip(pred, gt)):
    print(f"video {i}: predicted segments {[(s.label, s.length) for s in extract_segments(p)]}")

# %%
# The length distance ignores labels and compares 20-frame length histograms.
for i, (p, g) in enumerate(zip(pred, gt)):
    hp, hg = paired_histograms(p, g)
    print(f"video {i}: pred {np.round(hp, 2)}  gt {np.round(hg, 2)}  JSD {jsdist(hp, hg):.3f}")
print(f"activity JSD {m.jsd:.3f}")
