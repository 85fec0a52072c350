"""Short toy run: synthesise hairline composites, train briefly, evaluate.

Run from the repository root:  python demos/train_and_eval.py
"""

import numpy as np

from maga import metrics as M
from maga.data import make_dataset
from maga.net import NetConfig, predict, train

cfg = NetConfig(height=32, width=32, patch=4, dim=16, depth=2, n_maga_blocks=2,
                c2=8, c4=16, c8=16)
train_set = make_dataset(8, seed=0)
test_set = make_dataset(4, seed=1)

unknown = np.mean([np.mean(p.trimap == 0.5) for p in train_set])
print(f"{len(train_set)} training pairs, mean unknown fraction {unknown:.2f}")

params, losses = train(train_set, cfg, steps=60, batch_size=4, lr=3e-3)
print(f"unknown-region L1: {losses[0]:.4f} -> {losses[-1]:.4f} over {len(losses)} steps")

reports = [M.evaluate(predict(p.image, p.trimap, params, cfg), p.alpha, p.trimap) for p in test_set]
mean = M.mean_report(reports)
print(f"held-out  SAD {mean.sad:.4f}  MSE {mean.mse:.3f}  Grad {mean.grad:.4f}  Conn {mean.conn:.4f}")

# the trimap itself as a prediction is a useful floor for comparison
base = M.mean_report([M.evaluate(p.trimap, p.alpha, p.trimap) for p in test_set])
print(f"trimap-as-alpha baseline  SAD {base.sad:.4f}  MSE {base.mse:.3f}")
