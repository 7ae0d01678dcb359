"""
From pixels to a similarity target
==================================

A regularization set of images is turned into a ternary target matrix, and a
network's mixed layer similarities are scored against it.
"""
import numpy as np

from pixreg import simreg
from pixreg.datasets import synthetic_digits
from pixreg.nn import TapNet
from pixreg.trainer import ExperimentConfig, pair_similarities

# twelve toy images, 12x12 gray blobs
reg = synthetic_digits(12, seed=3)
print("labels:", reg.labels)

# cosine similarity of the centered, normalized pixel vectors
s_pix = simreg.pixel_similarity(reg.images, center="dataset")
print("pixel similarity, first row:", np.round(s_pix[0], 2))

# pairs above Th become +1, pairs below -Th become -1, the rest 0
target = simreg.make_target(s_pix, th=0.2)
vals = np.round(target.values[np.triu_indices(target.n, 1)])
print("target counts  -1: %d   0: %d   +1: %d" % tuple(np.sum(vals == v) for v in (-1, 0, 1)))
print("unordered pairs:", simreg.num_pairs(target.n), "  for N=5000:", simreg.num_pairs(5000))

# an untrained network and a uniform mix over its four tap layers
net = TapNet(ExperimentConfig(channels="4,4,4,4").architecture((1, 12, 12), 10), seed=0)
mixer = simreg.GammaMixer(net.num_taps)
i, j = np.triu_indices(target.n, 1)
s_cnn, per_layer = pair_similarities(net, mixer, reg.images[i], reg.images[j])
for l, s in enumerate(per_layer):
    print(f"layer {l}: mean similarity {s.data.mean():+.3f}")

loss = simreg.sim_loss(s_cnn, target.values[i, j])
print("similarity loss over all pairs: %.1f" % loss.item())

# the loss vanishes when the network already matches the target
print("loss at the target:", simreg.sim_loss(target.values[i, j], target.values[i, j]).item())
