"""
Folding a multi-branch conv block into one convolution
======================================================

A RepBlock trains with three parallel paths. Once the norm layers stop
updating, all of them are linear, so they collapse into one kernel-3 conv.
"""
import numpy as np

from repiln import RepBlock, RepILN, count_params, fuse_model
from repiln.tensor import Tensor

rng = np.random.default_rng(0)

# A small block with an identity path (same width, stride 1)
block = RepBlock(4, 4, stride=1, rng=rng, dtype=np.float64)
print("identity branch:", block.has_identity)

# Push a few batches through in training mode so the running stats move away from 0/1
block.train()
for _ in range(5):
    block(Tensor(rng.normal(0.5, 2.0, size=(8, 4, 32)), dtype=np.float64))
block.eval()

fused = block.fuse()
x = Tensor(rng.normal(size=(3, 4, 50)), dtype=np.float64)
gap = np.max(np.abs(block(x).data - fused(x).data))
print(f"max |train - fused| = {gap:.2e}")
print("params:", count_params(block), "->", count_params(fused))

# The merged kernel in one output channel: centre tap carries kernel-1 and identity
print(np.round(fused.weight.data[0], 3))

# %%
# The whole network
# -----------------
# Every RepBlock in the backbone folds the same way.  The attention units stay as they are.
model = RepILN()
deploy = fuse_model(model)
before, after = count_params(model), count_params(deploy)
print(f"network params {before:,} -> {after:,} ({100 * (before - after) / before:.2f}% fewer)")

windows = rng.normal(size=(4, 6, 200)).astype(np.float32)
print("velocity (train form): ", model.predict(windows)[0])
print("velocity (deploy form):", deploy.predict(windows)[0])
