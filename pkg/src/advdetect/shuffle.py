"""
Keyed block-wise pixel shuffling.

An image of size h x w x c is cut into M x M blocks, each block is flattened
row-major over (row, col, channel) into a vector of length M*M*c, the vector
is permuted with a single permutation derived from the key, and the blocks are
put back in place. The same permutation is used for every block.

The functions accept numpy arrays or torch tensors so the transform can sit
inside a differentiable model.
"""

from __future__ import annotations

import json
import os

import numpy as np
import torch

from .types import PermutationKey, RangeError, ShapeError, FormatError, validate_batch

FLATTEN_ORDER = "row_major_hwc"


def derive_permutation(key: PermutationKey, channels: int) -> np.ndarray:
    """
    Deterministic permutation of ``range(M*M*channels)`` seeded by the key.

    numpy's ``Generator.permutation`` over a PCG64 stream is a Fisher-Yates
    shuffle, so the same (seed, M, c) always gives the same vector.
    """
    if channels < 1:
        raise RangeError("channels must be >= 1")
    n = key.block_size * key.block_size * channels
    rng = np.random.Generator(np.random.PCG64(int(key.seed)))
    return rng.permutation(n)


def inverse_permutation(perm) -> np.ndarray:
    perm = np.asarray(perm)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return inv


def _to_blocks(x, m):
    n, h, w, c = x.shape
    x = x.reshape(n, h // m, m, w // m, m, c)
    x = _swap(x, (0, 1, 3, 2, 4, 5))
    return x.reshape(n, h // m, w // m, m * m * c)


def _from_blocks(v, m, shape):
    n, h, w, c = shape
    x = v.reshape(n, h // m, w // m, m, m, c)
    x = _swap(x, (0, 1, 3, 2, 4, 5))
    return x.reshape(n, h, w, c)


def _swap(x, axes):
    if isinstance(x, torch.Tensor):
        return x.permute(*axes)
    return np.transpose(x, axes)


def apply_block_permutation(images, perm, block_size: int):
    """
    Permute the flattened content of every ``block_size`` block by ``perm``.

    Output element ``i`` of each block vector is input element ``perm[i]``.
    No range validation, so it also works on gradients and perturbations.
    """
    if images.ndim != 4:
        raise ShapeError(f"expected (n, h, w, c), got {tuple(images.shape)}")
    n, h, w, c = images.shape
    m = block_size
    if h % m or w % m:
        raise ShapeError(f"block size {m} does not divide image size {h}x{w}")
    if len(perm) != m * m * c:
        raise ShapeError(f"permutation length {len(perm)} != {m}*{m}*{c}")
    v = _to_blocks(images, m)
    if isinstance(v, torch.Tensor):
        v = v[..., torch.as_tensor(perm, dtype=torch.long, device=v.device)]
    else:
        v = v[..., np.asarray(perm)]
    return _from_blocks(v, m, (n, h, w, c))


def shuffle_image(images, key: PermutationKey):
    if not isinstance(images, torch.Tensor):
        validate_batch(images)
    key.check_dims(images.shape[1], images.shape[2])
    perm = derive_permutation(key, images.shape[3])
    return apply_block_permutation(images, perm, key.block_size)


def unshuffle_image(images, key: PermutationKey):
    if not isinstance(images, torch.Tensor):
        validate_batch(images)
    key.check_dims(images.shape[1], images.shape[2])
    perm = derive_permutation(key, images.shape[3])
    return apply_block_permutation(images, inverse_permutation(perm), key.block_size)


def save_key(key: PermutationKey, path) -> None:
    with open(path, "w") as f:
        json.dump(
            {"seed": int(key.seed), "block_size": int(key.block_size), "flatten_order": FLATTEN_ORDER},
            f,
            indent=2,
        )


def load_key(path) -> PermutationKey:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as f:
        d = json.load(f)
    if d.get("flatten_order", FLATTEN_ORDER) != FLATTEN_ORDER:
        raise FormatError(f"unsupported flatten order {d.get('flatten_order')!r}")
    try:
        return PermutationKey(seed=int(d["seed"]), block_size=int(d["block_size"]))
    except KeyError as e:
        raise FormatError(f"key file missing field {e}") from None
