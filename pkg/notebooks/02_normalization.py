"""
Instance, batch and mixed normalization
=======================================

Shows why the instance branch shrugs off a per-image colour shift while the
batch branch does not, and how the XAN mix sits in between.
"""
import numpy as np

from fdglab import norms as N
from fdglab import tensor as T

rng = T.rng_for(1, "notebook-norms")
x = rng.normal(size=(8, 3, 6, 6))

# shift every channel of every image by its own constant, scale by its own factor
scale = rng.uniform(0.5, 2.0, size=(8, 3, 1, 1))
shift = rng.normal(size=(8, 3, 1, 1)) * 3
styled = x * scale + shift

affine = N.AffinePair.identity(3)
a = N.instance_norm(x, affine).data
b = N.instance_norm(styled, affine).data
print("IN  max change under per-image affine style:", float(np.abs(a - b).max()))

running = N.RunningStats.fresh(3)
a = N.batch_norm(x, affine, running).data
b = N.batch_norm(styled, affine, N.RunningStats.fresh(3)).data
print("BN  max change under the same style:       ", float(np.abs(a - b).max()))

state = N.XanLayerState.init(3, rng)
print("XAN mixing weights (IN side):", np.round(state.w_in, 3))
out = N.xan_forward(styled, state).data
print("XAN output per-channel mean", np.round(out.mean(axis=(0, 2, 3)), 4))

# running statistics move towards the batch moments
for _ in range(20):
    N.batch_norm(styled, affine, running)
print("running mean after 20 batches:", np.round(running.mean, 3))
print("batch mean:                   ", np.round(styled.mean(axis=(0, 2, 3)), 3))
