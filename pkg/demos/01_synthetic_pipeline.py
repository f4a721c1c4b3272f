"""
End to end on synthetic data
============================

Generate a small ordered activity, train the encoder, decoder and two-level
codebook, then segment every video and score the result. Pass an epoch
count on the command line to train longer (default 5, about 10 s).
"""

import sys

import numpy as np

from hvq.inference import segment_activity
from hvq.metrics import evaluate
from hvq.synthetic import SyntheticSpec, nearest_mean_labels, synth_generate
from hvq.training import TrainConfig, train_activity

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 5

# %%
# Four actions, each made of two or three subactions. Every video visits the
# actions in the same order with random segment lengths.
ds = synth_generate(SyntheticSpec(K=4, n_videos=10, seed=0))
print(f"{len(ds.videos)} videos, {sum(v.length for v in ds.videos)} frames, K={ds.K}")
print("first video, action per frame:", "".join(map(str, ds.labels[0])))

# %%
# A nearest-mean classifier with access to labels bounds what is achievable.
oracle = evaluate({"toy": nearest_mean_labels(ds)}, {"toy": ds.labels})
print(f"nearest-mean oracle MoF {oracle.mof:.3f}")

# %%
# Training is unsupervised: labels are never read.
model, books, report = train_activity(ds, TrainConfig(epochs=epochs, seed=0))
for name in ("rec", "commit_z", "commit_q"):
    series = getattr(report, name)
    print(f"{name:9s} epoch 1 {series[0]:10.4f}   epoch {epochs} {series[-1]:10.4f}")
print(f"codebook sizes {[b.size for b in books]}")

# %%
# Decode with frame-wise argmax and with the ordered, smoothed decoder.
for decoder in ("argmax", "fifa", "dp"):
    segs, stats = segment_activity(model, books, ds.videos, decoder)
    m = evaluate({"toy": segs}, {"toy": ds.labels})
    runs = np.mean([1 + np.count_nonzero(np.diff(s)) for s in segs])
    print(f"{decoder:6s} MoF {m.mof:.3f}  F1 {m.f1:.3f}  JSD {m.jsd:.3f}  "
          f"segments/video {runs:.1f}")
print("cluster order", stats.order)
