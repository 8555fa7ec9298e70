#
# 17/10/2026
# cfrelevance: confidence-filtered relevance for naturalness classifiers
#
# Released under GNU GENERAL PUBLIC LICENSE v3. (Use at your own risk)
#

"""
Relevance-weighted attention rollout.

    Abar_b = I + 1/H sum_h max(gradA_bh * R_bh, 0)
    M      = Abar_1 Abar_2 ... Abar_B

The CLS row of M (without its own column) is the patch relevance, which
is replicated over each patch footprint to give a pixel map.
"""

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ClassIndexError, DimensionError, InputError
from .tensorcore import matmul
from .transformer import attribution_inputs, forward

RAW = 'raw'
MINMAX = 'minmax'


@dataclass(frozen=True)
class BlockFusion:
    abar: np.ndarray  # T x T


@dataclass(frozen=True)
class RelevanceMap:
    values: np.ndarray  # height x width, >= 0
    normalization: str = RAW

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    def total(self):
        return math.fsum(self.values.ravel())

    def minmax(self):
        "per-image [0, 1] scaling; a constant map becomes all zeros"
        lo, hi = float(self.values.min()), float(self.values.max())
        if hi == lo:
            return RelevanceMap(np.zeros_like(self.values), MINMAX)
        return RelevanceMap((self.values - lo) / (hi - lo), MINMAX)


def fuse_block(a, grad, rel):
    "one block of relevance-adjusted attention, from H x T x T stacks"
    a, grad, rel = (np.asarray(x, dtype=np.float64) for x in (a, grad, rel))
    if a.ndim != 3 or a.shape[1] != a.shape[2] or grad.shape != a.shape or rel.shape != a.shape:
        raise DimensionError("attention %s, gradient %s and relevance %s must share H x T x T"
                             % (a.shape, grad.shape, rel.shape))
    heads, tokens, _ = a.shape
    positive = np.maximum(grad * rel, 0.0)
    return BlockFusion(np.eye(tokens) + positive.sum(axis=0) / heads)


def rollout_chain(blocks):
    """
    M = Abar_1 ... Abar_B, block 1 (nearest the input) first
    """
    blocks = list(blocks)
    if not blocks:
        raise InputError("rollout needs at least one block")
    m = blocks[0].abar
    for block in blocks[1:]:
        if block.abar.shape != m.shape:
            raise DimensionError("block token counts differ: %s vs %s" % (block.abar.shape, m.shape))
        m = matmul(m, block.abar)
    return m


def extract_patch_relevance(m, cls_index=0):
    m = np.asarray(m, dtype=np.float64)
    if not 0 <= cls_index < m.shape[0]:
        raise ClassIndexError("cls index %d out of range for %d tokens" % (cls_index, m.shape[0]))
    return np.delete(m[cls_index], cls_index)


def to_pixel_map(patch_rel, image_size, patch_size, normalize=False):
    """
    nearest replication of P = (image_size/patch_size)^2 patch values
    """
    patch_rel = np.asarray(patch_rel, dtype=np.float64)
    if patch_size < 1 or image_size % patch_size:
        raise DimensionError("image_size %d not divisible by patch_size %d" % (image_size, patch_size))
    grid = image_size // patch_size
    if patch_rel.shape != (grid * grid,):
        raise DimensionError("%d patch values for a %dx%d grid" % (patch_rel.size, grid, grid))
    values = np.repeat(np.repeat(patch_rel.reshape(grid, grid), patch_size, axis=0), patch_size, axis=1)
    result = RelevanceMap(values)
    return result.minmax() if normalize else result


def explain_image(image, params, config, target_class=1, provider='lrp', epsilon=1e-6, grad_target='logit'):
    "raw pixel relevance of one image towards target_class"
    _, cache = forward(image, params, config)
    inputs = attribution_inputs(cache, target_class, provider, epsilon, grad_target)
    fusions = [fuse_block(block.attention, g, r)
               for block, g, r in zip(cache.blocks, inputs.gradients, inputs.relevance)]
    patch_rel = extract_patch_relevance(rollout_chain(fusions), 0)
    return to_pixel_map(patch_rel, config.image_size, config.patch_size)


def write_pgm(path, relevance_map):
    "8-bit grayscale, min-max scaled"
    scaled = relevance_map.minmax().values
    Image.fromarray(np.round(scaled * 255).astype(np.uint8)).save(path, format='PPM')
