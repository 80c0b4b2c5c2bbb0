"""
Top-e% attention over time steps
================================

Scores form an L x L matrix, one row per query step.  Each row keeps its
largest entries before the softmax, so every output step mixes only a few
value steps.
"""
import numpy as np

from repiln import TSSA
from repiln import tensor as T
from repiln.tensor import Tensor
from repiln.tssa import max_e_mask, retained_count

row = Tensor(np.array([[1.0, 3.0, 2.0, 0.0]]), dtype=np.float64)
for e in (25, 50, 75, 100):
    kept = max_e_mask(row, e).data
    print(f"e={e:3d}: keep {retained_count(e, 4)} ->", np.where(kept > -1e300, kept, -np.inf))

# ties resolve towards the lower index
tied = max_e_mask(Tensor(np.array([[5.0, 5.0, 1.0, 1.0]]), dtype=np.float64), 25).data
print("tie:", np.where(tied > -1e300, tied, -np.inf))

# %%
# Inside the module
rng = np.random.default_rng(1)
attn = TSSA(8, e=25, rng=rng, dtype=np.float64)
x = Tensor(rng.normal(size=(8, 16)), dtype=np.float64)
a = attn.attention_weights(x).data
print("nonzero per row:", (a > 0).sum(axis=1))
print("row sums:", np.round(a.sum(axis=1), 12))

# %%
# Cost grows with the square of the window length
for L in (100, 200, 400, 800):
    print(f"L={L:4d}  attention MACs {attn.attention_macs(L):>10,}  total {attn.macs(L):>10,}")

# Constant values survive any mask unchanged: every output is a convex mix
v = Tensor(np.tile([[1.5], [-2.0]], (1, 16)), dtype=np.float64)
q = Tensor(rng.normal(size=(2, 16)), dtype=np.float64)
print(T.matmul(v, T.transpose(T.softmax_rows(max_e_mask(T.matmul(T.transpose(q), q), 10)))).data[:, :4])
