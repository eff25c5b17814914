#!/usr/bin/env python3
"""Look at the co-leaf kernel on the two-covariate toy design.

The joint forest splits where the outcome and the treatment both change, so
points on the same side of x1 = 0.5 look alike and points across it do not.
"""

import numpy as np

from confbal import DgpSpec, Model, ForestParams, generate, grow_forest, rf_gram, standardize_pair

sample = generate(DgpSpec(Model.TOY, 1000, 2, seed=1))
d = sample.dataset
fit, ev = np.arange(500), np.arange(500, 1000)

pair = standardize_pair(d.Y[fit], d.A[fit])
forest = grow_forest(d.X[fit], pair.Y_tilde, pair.A_tilde, ForestParams(m=300, min_node=30, seed=1))
K = rf_gram(forest, d.X[ev]).values

# average similarity between the four quadrants cut at 0.5
X = d.X[ev]
quad = (X[:, 0] > 0.5).astype(int) * 2 + (X[:, 1] > 0.5).astype(int)
names = ["x1<.5,x2<.5", "x1<.5,x2>.5", "x1>.5,x2<.5", "x1>.5,x2>.5"]
print("mean kernel value between quadrants")
print(" " * 14 + "".join(f"{n:>14}" for n in names))
for a in range(4):
    row = [K[np.ix_(quad == a, quad == b)].mean() for b in range(4)]
    print(f"{names[a]:<14}" + "".join(f"{v:>14.3f}" for v in row))
