"""
Voting on a hand-made similarity matrix
=======================================

Three proposals, three classes. Proposal 0 looks like class 0, proposal 1 like
class 2, proposal 2 is background that matches nothing well. Run with
``python3 demos/voting_walkthrough.py``.
"""

import numpy as np

from nsod.voting import dual_softmax, fuse_scores, image_scores, to_cway_label, to_multiclass_label

np.set_printoptions(precision=3, suppress=True)

# mean cosine similarity of each proposal to each class's support images
S = np.array([
    [0.92, 0.40, 0.35],
    [0.38, 0.41, 0.88],
    [0.45, 0.47, 0.44],
])

# raw cosines sit in a narrow band, so every softmax is close to uniform
cls, det = dual_softmax(S)
print("class softmax per proposal\n", cls)
print("proposal softmax per class\n", det)
print("image scores, unscaled:", image_scores(S))

# a temperature spreads the band out; the pipeline default is 16
sS = image_scores(16 * S)
print("image scores, scale 16:", sS)
print("multi-class label:", to_multiclass_label(sS), " argmax:", to_cway_label(sS))

# a teacher unsure about class 2 pulls that score down, here not below 0.5
A = np.array([
    [0.90, 0.05, 0.05],
    [0.20, 0.20, 0.60],
    [0.40, 0.30, 0.30],
])
sA = image_scores(A)
q = fuse_scores(sS, sA)
print("teacher scores:", sA)
print("fused:", q, " label:", to_multiclass_label(q))
