"""
Scoring a minibatch by its activation codes
===========================================

A batch goes through the network once. Each sample becomes a binary code of
which hidden units fired, the codes are compared pairwise, and the score is
the log-determinant of the resulting kernel.
"""
import math

import numpy as np

from seqcl import RngStream, build_kernel, init_model, log_det_psd, nwot_score
from seqcl.neural import ModelConfig, replace_config

# the hand example: two codes that agree on one of three units
codes = [(1, 0, 1), (1, 1, 0)]
k = build_kernel(codes)
print("kernel for", codes)
print(k)
print("score", log_det_psd(k), "ln 8 =", math.log(8))

# a real network and a real batch
model = init_model(ModelConfig(8, (64, 64), 4), RngStream(0, ("init",)))
x = np.random.default_rng(0).normal(size=(32, 8))
print("\ndistinct samples     ", nwot_score(model, x))

# repeating one sample collapses the kernel to rank one; the jitter ladder keeps it finite
copies = np.repeat(x[:1], 32, axis=0)
print("one sample 32 times  ", nwot_score(model, copies))

# a squeezed input space yields fewer distinct codes and a lower score
squeezed = x.copy()
squeezed[:, 2:] = 0.0
print("6 of 8 features zeroed", nwot_score(model, squeezed))

# AID scoring: negatives are let through with probability 1 - p1, positives dropped with p2
mask = RngStream(0, (0, 1, "aid-mask"))
print("\nAID score (p1=0.5, p2=0.2)", nwot_score(model, x, "aid", mask))
degenerate = replace_config(model, aid_p1=1.0, aid_p2=0.0)
print("AID with p1=1, p2=0 is ReLU:", nwot_score(degenerate, x, "aid", mask) == nwot_score(model, x))
