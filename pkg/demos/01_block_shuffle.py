"""
Keyed block shuffling
=====================

The robust classifier never sees raw pixels. Every image is cut into M x M
blocks, each block is flattened to a vector of M*M*c values, the vector is
permuted with a permutation derived from a secret key, and the blocks are
put back. Same key, same permutation for every block and every image.
"""

import numpy as np

from advdetect.shuffle import derive_permutation, shuffle_image, unshuffle_image
from advdetect.types import PermutationKey

# a key is a seed plus the block size; 4 divides 32 so CIFAR-sized images work
key = PermutationKey(seed=2024, block_size=4)
perm = derive_permutation(key, channels=3)
print("permutation of the 48 values in a 4x4x3 block:")
print(perm)

# %%
# A smooth gradient image makes the effect easy to read: inside each block
# the values get scrambled (across channels too), but no value leaves its
# block.
h = w = 8
yy, xx = np.mgrid[0:h, 0:w]
img = np.stack([yy / (h - 1), xx / (w - 1), 0.5 * np.ones((h, w))], axis=-1)[None]
out = shuffle_image(img, key)
print("red channel before:\n", np.round(img[0, :, :, 0], 2))
print("red channel after:\n", np.round(out[0, :, :, 0], 2))

# %%
# Each block keeps its multiset of values, so block means are unchanged
blocks_in = img.reshape(1, 2, 4, 2, 4, 3).mean(axis=(2, 4, 5))
blocks_out = out.reshape(1, 2, 4, 2, 4, 3).mean(axis=(2, 4, 5))
print("block means equal:", np.allclose(blocks_in, blocks_out))

# %%
# and the key holder can undo it exactly
print("exact inverse:", np.array_equal(unshuffle_image(out, key), img))

# %%
# The transform is a fixed permutation of coordinates, so it preserves
# distances: a perturbation keeps its L2 and Linf size after shuffling.
rng = np.random.default_rng(0)
x = rng.random((1, 32, 32, 3))
x_adv = np.clip(x + rng.uniform(-8 / 255, 8 / 255, x.shape), 0, 1)
delta = x_adv - x
a, b = shuffle_image(x, key), shuffle_image(x_adv, key)
print("||delta||_2 before / after: %.6f / %.6f" % (np.linalg.norm(delta), np.linalg.norm(b - a)))

# %%
# A different key gives an unrelated permutation
other = derive_permutation(PermutationKey(2025, 4), 3)
print("positions that agree with another key:", int(np.sum(other == perm)), "of", len(perm))
