"""
Convolutional backbone, fusion head and model checkpoints.

Three stride-2 conv + ReLU stages: stage 2 is f_local (32 channels),
stage 3 is f_global (64 channels). The head concatenates the pooled
f_local with the 64-vector coming out of the QCB (or the pooled f_global
when the block is off), projects to d and L2-normalises. The
pre-normalisation norm is returned as the quality signal.
"""

from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from losses import ClassifierHead, init_head
from numerics import (
    DTYPE, ParamSet, RngStream, conv2d, conv2d_backward, fan_in_uniform,
    global_avg_pool, global_avg_pool_backward, l2_normalize, l2_normalize_backward,
    load_named_tensors, relu, relu_backward, resize_bilinear, save_named_tensors,
)
from qcb import CHANNELS as QCB_CHANNELS, QcbParams, init_qcb_params, qcb_forward
from utils import log

STAGES = (('conv1', 3, 16), ('conv2', 16, 32), ('conv3', 32, 64))
LOCAL_CHANNELS = 32
MIN_SCALED_SIZE = 8


@dataclass
class EncoderParams(ParamSet):
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    conv3_w: np.ndarray
    conv3_b: np.ndarray
    proj_w: np.ndarray  # d x (32 + 64)
    proj_b: np.ndarray

    @property
    def dim(self) -> int:
        return self.proj_w.shape[0]


class EncoderOutput(NamedTuple):
    f_local: np.ndarray
    f_global: np.ndarray
    cache: dict


def init_params(rng: RngStream, d: int = 32) -> EncoderParams:
    values = {}
    for name, c_in, c_out in STAGES:
        values[f"{name}_w"] = fan_in_uniform(rng, (c_out, c_in, 3, 3), c_in * 9)
        values[f"{name}_b"] = np.zeros(c_out, dtype=DTYPE)
    width = LOCAL_CHANNELS + QCB_CHANNELS
    values['proj_w'] = fan_in_uniform(rng, (d, width), width, gain=3.0)
    values['proj_b'] = np.zeros(d, dtype=DTYPE)
    return EncoderParams(**values)


# ============================================================================
# Backbone
# ============================================================================

def forward(image: np.ndarray, params: EncoderParams) -> EncoderOutput:
    """H x W x 3 image (or N x H x W x 3 batch) -> stage-2 and stage-3 activations."""
    img = np.asarray(image, dtype=DTYPE)
    batched = img.ndim == 4
    if img.ndim == 3:
        img = img[None]
    if img.ndim != 4 or img.shape[-1] != 3:
        raise ValueError(f"forward expects H x W x 3 images, got shape {np.shape(image)}")

    x = np.ascontiguousarray(img.transpose(0, 3, 1, 2))
    cache = {'batched': batched, 'inputs': [], 'pres': []}
    for name, _, _ in STAGES:
        pre = conv2d(x, getattr(params, f"{name}_w"), stride=2, pad=1)
        pre += getattr(params, f"{name}_b")[None, :, None, None]
        cache['inputs'].append(x)
        cache['pres'].append(pre)
        x = relu(pre)

    f_local = relu(cache['pres'][1])
    f_global = x
    if not batched:
        return EncoderOutput(f_local[0], f_global[0], cache)
    return EncoderOutput(f_local, f_global, cache)


def backward(upstream: Tuple[Optional[np.ndarray], Optional[np.ndarray]],
             cache: dict, params: EncoderParams) -> EncoderParams:
    """
    Gradients of the conv stages from (grad f_local, grad f_global).

    Either upstream entry may be None. The proj fields of the result are
    zero; head_backward fills them.
    """
    if not cache or len(cache.get('pres', [])) != len(STAGES):
        raise ValueError("backward needs the cache filled by forward")
    pres = cache['pres']

    def batch(g, like):
        if g is None:
            return np.zeros_like(like)
        g = np.asarray(g, dtype=DTYPE)
        if g.ndim == 3:
            g = g[None]
        if g.shape != like.shape:
            raise ValueError(f"upstream shape {g.shape} does not match cached activation {like.shape}")
        return g

    grad_act = batch(upstream[1], pres[2])
    grad_local = batch(upstream[0], pres[1])
    grads = params.zeros_like()
    for stage in reversed(range(len(STAGES))):
        name = STAGES[stage][0]
        if stage == 1:
            grad_act = grad_act + grad_local
        grad_pre = relu_backward(grad_act, pres[stage])
        grad_act, grad_w = conv2d_backward(grad_pre, cache['inputs'][stage],
                                           getattr(params, f"{name}_w"), stride=2, pad=1)
        setattr(grads, f"{name}_w", grad_w)
        setattr(grads, f"{name}_b", grad_pre.sum(axis=(0, 2, 3)))
    return grads


# ============================================================================
# Fusion head
# ============================================================================

def head(output: EncoderOutput, f_new: np.ndarray, params: EncoderParams,
         cache: Optional[dict] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (f_all, raw_norm); raw_norm is the norm before normalisation."""
    pooled = global_avg_pool(output.f_local)
    f_new = np.asarray(f_new, dtype=DTYPE)
    if pooled.shape[:-1] != f_new.shape[:-1] or f_new.shape[-1] != QCB_CHANNELS:
        raise ValueError(f"f_new shape {f_new.shape} does not match pooled f_local {pooled.shape}")
    joined = np.concatenate([pooled, f_new], axis=-1)
    z = joined @ params.proj_w.T + params.proj_b
    raw_norm = np.linalg.norm(z, axis=-1)
    if cache is not None:
        cache.update({'joined': joined, 'z': z, 'local_shape': output.f_local.shape})
    return l2_normalize(z), raw_norm


def head_backward(grad_f_all: np.ndarray, cache: dict,
                  params: EncoderParams) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad proj_w, grad proj_b, grad f_local map, grad f_new)."""
    grad_z = l2_normalize_backward(grad_f_all, cache['z'])
    joined = cache['joined']
    if grad_z.ndim == 1:
        grad_w = np.outer(grad_z, joined)
        grad_b = grad_z.copy()
    else:
        grad_w = grad_z.T @ joined
        grad_b = grad_z.sum(axis=0)
    grad_joined = grad_z @ params.proj_w
    grad_local = global_avg_pool_backward(grad_joined[..., :LOCAL_CHANNELS], cache['local_shape'])
    return grad_w, grad_b, grad_local, grad_joined[..., LOCAL_CHANNELS:]


# ============================================================================
# Model bundle and checkpoints
# ============================================================================

@dataclass
class Model:
    encoder: EncoderParams
    qcb: QcbParams
    head: ClassifierHead
    aux: Optional[ClassifierHead] = None
    meta: Dict = field(default_factory=dict)

    def parts(self) -> Dict[str, ParamSet]:
        parts = {'encoder': self.encoder, 'qcb': self.qcb, 'head': self.head}
        if self.aux is not None:
            parts['aux'] = self.aux
        return parts

    def named(self) -> Dict[str, np.ndarray]:
        tensors = {}
        for prefix, part in self.parts().items():
            tensors.update(part.named(prefix))
        return tensors


def init_model(seed: int, d: int, num_classes: int, aux_head: bool = False) -> Model:
    """Independent init streams per component so toggling one never shifts another."""
    rng = RngStream(seed, 'init')
    return Model(
        encoder=init_params(rng.derive('encoder'), d),
        qcb=init_qcb_params(rng.derive('qcb')),
        head=init_head(rng.derive('head'), d, num_classes),
        aux=init_head(rng.derive('aux'), QCB_CHANNELS, num_classes) if aux_head else None,
    )


def save_checkpoint(path, model: Model, config_echo: Optional[dict] = None):
    meta = dict(model.meta)
    if config_echo is not None:
        meta['config'] = config_echo
    save_named_tensors(path, model.named(), meta)
    log('DEBUG', f"[Encoder] checkpoint written to {path}")


def load_checkpoint(path) -> Model:
    tensors, meta = load_named_tensors(path)
    aux = ClassifierHead.from_named(tensors, 'aux') if 'aux.W' in tensors else None
    return Model(
        encoder=EncoderParams.from_named(tensors, 'encoder'),
        qcb=QcbParams.from_named(tensors, 'qcb'),
        head=ClassifierHead.from_named(tensors, 'head'),
        aux=aux,
        meta=meta,
    )


# ============================================================================
# Inference descriptors
# ============================================================================

def describe(images: np.ndarray, model: Model, qcb_enabled: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Single-scale (f_all, raw_norm) for an image or a batch of equally sized images."""
    out = forward(images, model.encoder)
    if qcb_enabled:
        f_new = qcb_forward(out.f_global, model.qcb)
    else:
        f_new = global_avg_pool(out.f_global)
    return head(out, f_new, model.encoder)


def _scaled_sizes(height: int, width: int, scales: Sequence[float]) -> List[Tuple[int, int]]:
    sizes = []
    for scale in scales:
        h, w = int(round(height * scale)), int(round(width * scale))
        if min(h, w) < MIN_SCALED_SIZE:
            log('WARN', f"[Encoder] scale {scale:.4f} gives {h}x{w} < {MIN_SCALED_SIZE}, skipped")
            continue
        sizes.append((h, w))
    if not sizes:
        raise ValueError(f"no scale in {list(scales)} keeps a {height}x{width} image >= {MIN_SCALED_SIZE} px")
    return sizes


def multiscale_descriptors(images: Sequence[np.ndarray], model: Model, scales: Sequence[float],
                           qcb_enabled: bool = True) -> np.ndarray:
    """N equally sized images -> N x d unit descriptors averaged over scales."""
    images = [np.asarray(img, dtype=DTYPE) for img in images]
    if not images:
        return np.zeros((0, model.encoder.dim), dtype=DTYPE)
    height, width = images[0].shape[:2]
    if any(img.shape != images[0].shape for img in images):
        raise ValueError("multiscale_descriptors needs images of one size; call it per size group")

    total = np.zeros((len(images), model.encoder.dim), dtype=DTYPE)
    for h, w in _scaled_sizes(height, width, scales):
        if (h, w) == (height, width):
            batch = np.stack(images)
        else:
            batch = np.stack([resize_bilinear(img, h, w) for img in images])
        f_all, _ = describe(batch, model, qcb_enabled)
        total += l2_normalize(f_all)
    return l2_normalize(total)


def multiscale_descriptor(image: np.ndarray, model: Model, scales: Sequence[float],
                          qcb_enabled: bool = True) -> np.ndarray:
    return multiscale_descriptors([image], model, scales, qcb_enabled)[0]
