"""Walk through orderless pooling on a single random feature map.

Run: python demos/pooling_walkthrough.py
"""
import numpy as np

from bcnn import encoders as E
from bcnn.tensor import Tensor, make_rng

rng = make_rng(0)
L, C = 49, 8
F = rng.standard_normal((L, C))

# bilinear: sum of per-location outer products
x = E.bilinear_pool(Tensor(F), Tensor(F)).data
print("bilinear pooled shape", x.shape, "symmetric:", np.allclose(x, x.T))
d = E.normalize_descriptor(E.flatten_pooled(Tensor(x), False)).data
print("normalized descriptor norm", round(float(np.linalg.norm(d)), 12))

# shuffling locations does not change anything
perm = rng.permutation(L)
x2 = E.bilinear_pool(Tensor(F[perm]), Tensor(F[perm])).data
print("max change after shuffling locations", float(np.abs(x - x2).max()))

# a NetVLAD codebook from k-means, then soft vs hard assignment
cb = E.kmeans_init(F, 4, seed=0)
soft = E.netvlad_encode(Tensor(F), cb).data
hard = E.hard_vlad_encode(F, cb.mu.data)
print("k-means gamma", round(cb.gamma, 4))
print("soft vs hard VLAD gap at the k-means scale", float(np.abs(soft - hard).max()))
sharp = E.Codebook.from_centers(cb.mu.data, 1e4, tied=True)
print("soft vs hard VLAD gap with a very sharp codebook",
      float(np.abs(E.netvlad_encode(Tensor(F), sharp).data - hard).max()))

# projecting one stream before pooling equals a Kronecker projection afterwards
P = E.pca_projection(F, 2)
low = E.bilinear_pool(Tensor(F @ P.P.data), Tensor(F)).data.ravel()
full = E.kronecker_projection(P.P.data, C).T @ x.ravel()
print("rank-2 projection, direct vs Kronecker route", float(np.abs(low - full).max()))
