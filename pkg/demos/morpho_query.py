"""Which Tetris branch wins where?

Builds a 1-channel query map holding a horizontal and a vertical line,
runs the four branches with box kernels, and prints the argmax branch per
site after instance norm and reweighting.  Horizontal structure should be
claimed by ``h`` and vertical structure by ``v``.
"""

import numpy as np

from maga import tensor as T
from maga.attention import BRANCHES, branch_kernel_shapes, morpho_reweight, tetris_branches
from maga.tensor import Tensor

q = np.zeros((1, 8, 8))
q[0, 2, 1:7] = 1.0  # horizontal stroke
q[0, 3:8, 5] = 1.0  # vertical stroke

kernels = {b: [Tensor(np.ones(s) / s[-1] / s[-2]) for s in branch_kernel_shapes(b, 1, 3)]
           for b in BRANCHES}
maps = tetris_branches(Tensor(q), kernels, BRANCHES)
q_f, w_r = morpho_reweight(maps, Tensor([0.0, 1.0, 0.0]))

y, _ = T.instance_norm(T.stack(maps, 0))
winner = np.argmax(y.data * w_r.data[:, :, None, None], axis=0)[0]

print("branch weights:", {b: round(float(w), 4) for b, w in zip(BRANCHES, w_r.data[:, 0])})
print("winning branch per site (on the strokes):")
for i in range(8):
    print(" ".join(BRANCHES[winner[i, j]].ljust(2) if q[0, i, j] else ". " for j in range(8)))
