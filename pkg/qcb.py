"""
Quality Compensation Block.

Eight 3x3 compensation convs over the low-quality global feature map,
fused by one shared 1x1 conv, summed, pooled and added to the pooled
input. The fuse conv starts at zero so the block is an identity at init.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from numerics import (
    DTYPE, ParamSet, RngStream, conv2d, conv2d_backward, fan_in_uniform,
    global_avg_pool, global_avg_pool_backward, relu, relu_backward,
)

NUM_TRANSFORMS = 8
CHANNELS = 64


@dataclass
class QcbParams(ParamSet):
    comp_w: np.ndarray  # 8 x 64 x 64 x 3 x 3
    comp_b: np.ndarray  # 8 x 64
    fuse_w: np.ndarray  # 64 x 64 x 1 x 1
    fuse_b: np.ndarray  # 64


def init_qcb_params(rng: RngStream) -> QcbParams:
    return QcbParams(
        comp_w=fan_in_uniform(rng, (NUM_TRANSFORMS, CHANNELS, CHANNELS, 3, 3), CHANNELS * 9),
        comp_b=np.zeros((NUM_TRANSFORMS, CHANNELS), dtype=DTYPE),
        fuse_w=np.zeros((CHANNELS, CHANNELS, 1, 1), dtype=DTYPE),
        fuse_b=np.zeros(CHANNELS, dtype=DTYPE),
    )


def qcb_forward(f_low: np.ndarray, params: QcbParams, cache: Optional[dict] = None) -> np.ndarray:
    """
    64 x H x W (or N x 64 x H x W) map -> 64-vector (or N x 64).

    Pass a dict as cache to keep what qcb_backward needs.
    """
    x = np.asarray(f_low, dtype=DTYPE)
    batched = x.ndim == 4
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != CHANNELS:
        raise ValueError(f"qcb_forward expects a {CHANNELS}-channel feature map, got shape {np.shape(f_low)}")

    pres = []
    summed = np.zeros_like(x)
    for i in range(NUM_TRANSFORMS):
        pre = conv2d(x, params.comp_w[i], stride=1, pad=1) + params.comp_b[i][None, :, None, None]
        pres.append(pre)
        summed += relu(pre)

    # the fuse conv is linear, so fusing the sum equals summing the fused maps
    fused = conv2d(summed, params.fuse_w) + NUM_TRANSFORMS * params.fuse_b[None, :, None, None]
    f_new = global_avg_pool(fused) + global_avg_pool(x)

    if cache is not None:
        cache.update({'x': x, 'pres': pres, 'summed': summed, 'batched': batched})
    return f_new if batched else f_new[0]


def qcb_backward(upstream: np.ndarray, cache: dict, params: QcbParams) -> Tuple[QcbParams, np.ndarray]:
    """Returns (parameter grads, grad wrt f_low)."""
    if not cache or 'x' not in cache:
        raise ValueError("qcb_backward needs the cache filled by qcb_forward")
    x = cache['x']
    g = np.asarray(upstream, dtype=DTYPE)
    if g.ndim == 1:
        g = g[None]
    if g.shape != (x.shape[0], CHANNELS):
        raise ValueError(f"upstream shape {np.shape(upstream)} does not match cached batch {x.shape}")

    grad_x = global_avg_pool_backward(g, x.shape)
    grad_fused = global_avg_pool_backward(g, x.shape)
    grad_summed, grad_fuse_w = conv2d_backward(grad_fused, cache['summed'], params.fuse_w)
    grad_fuse_b = NUM_TRANSFORMS * g.sum(axis=0)

    grad_comp_w = np.zeros_like(params.comp_w)
    grad_comp_b = np.zeros_like(params.comp_b)
    for i, pre in enumerate(cache['pres']):
        grad_pre = relu_backward(grad_summed, pre)
        gx, gw = conv2d_backward(grad_pre, x, params.comp_w[i], stride=1, pad=1)
        grad_x += gx
        grad_comp_w[i] = gw
        grad_comp_b[i] = grad_pre.sum(axis=(0, 2, 3))

    grads = QcbParams(comp_w=grad_comp_w, comp_b=grad_comp_b, fuse_w=grad_fuse_w, fuse_b=grad_fuse_b)
    return grads, (grad_x if cache['batched'] else grad_x[0])
