"""
Objective math: quality descriptor, margin softmax heads, gradient
scaling terms and InfoNCE.

Every loss returns its value together with the gradient w.r.t. its
inputs; nothing here keeps state. The quality descriptor (feature norms,
their batch mean and std) is a constant as far as gradients go.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import numpy as np

from numerics import DTYPE, ParamSet, RngStream, l2_normalize, l2_normalize_backward

COS_CLIP = 1e-9
GST_CLIP = 1e-6
SIGMA_FLOOR = 1e-9


@dataclass
class LossConfig:
    s: float = 30.0
    m: float = 0.15
    h: float = 0.33
    tau: float = 1.0
    alpha: float = 0.2
    beta: float = 0.2

    def __post_init__(self):
        if self.s <= 0:
            raise ValueError(f"s must be > 0, got {self.s}")
        if not 0 <= self.m < math.pi / 2:
            raise ValueError(f"m must lie in [0, pi/2), got {self.m}")
        if self.h <= 0:
            raise ValueError(f"h must be > 0, got {self.h}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")


@dataclass
class ClassifierHead(ParamSet):
    """d x C class weights; columns are L2-normalised before use."""
    W: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.W.shape[1]

    def normalized(self) -> np.ndarray:
        return l2_normalize(self.W, axis=0)

    def cosines(self, embeddings: np.ndarray) -> np.ndarray:
        return np.asarray(embeddings, dtype=DTYPE) @ self.normalized()

    def backward(self, grad_cosines: np.ndarray, embeddings: np.ndarray) -> Tuple[np.ndarray, 'ClassifierHead']:
        """Returns (grad wrt embeddings, grad wrt W)."""
        grad_embeddings = grad_cosines @ self.normalized().T
        grad_wn = np.asarray(embeddings, dtype=DTYPE).T @ grad_cosines
        return grad_embeddings, ClassifierHead(W=l2_normalize_backward(grad_wn, self.W, axis=0))

    def renormalize(self):
        self.W[...] = self.normalized()


def init_head(rng: RngStream, dim: int, num_classes: int) -> ClassifierHead:
    return ClassifierHead(W=l2_normalize(rng.normal(0.0, 1.0, (dim, num_classes)), axis=0))


# ============================================================================
# Quality descriptor
# ============================================================================

@dataclass
class QualityBatch:
    norms: np.ndarray
    mu: float
    sigma: float
    desc: np.ndarray


@dataclass
class NormStats:
    """Running feature-norm statistics of the EMA (original AdaFace) indicator."""
    mean: float = 20.0
    std: float = 100.0


def quality_descriptor(norms, h: float) -> QualityBatch:
    """Batch-standardised, clipped feature norm mapped to [0, 1] (population std)."""
    norms = np.asarray(norms, dtype=DTYPE).reshape(-1)
    if norms.size == 0:
        raise ValueError("quality_descriptor needs a non-empty batch")
    mu = float(norms.mean())
    sigma = float(norms.std())
    if sigma < SIGMA_FLOOR:
        desc = np.full_like(norms, 0.5)
    else:
        t = np.clip((norms - mu) / (sigma / h), -1.0, 1.0)
        desc = (t + 1.0) / 2.0
    return QualityBatch(norms=norms, mu=mu, sigma=sigma, desc=desc)


def ema_quality_descriptor(norms, stats: NormStats, h: float,
                           alpha: float = 0.01) -> Tuple[QualityBatch, NormStats]:
    """Quality indicator from running statistics (updated with this batch first)."""
    norms = np.asarray(norms, dtype=DTYPE).reshape(-1)
    if norms.size == 0:
        raise ValueError("ema_quality_descriptor needs a non-empty batch")
    batch_std = float(norms.std(ddof=1)) if norms.size > 1 else 0.0
    updated = NormStats(
        mean=stats.mean * (1 - alpha) + float(norms.mean()) * alpha,
        std=stats.std * (1 - alpha) + batch_std * alpha,
    )
    t = np.clip((norms - updated.mean) / (updated.std + 1e-3) * h, -1.0, 1.0)
    return QualityBatch(norms=norms, mu=updated.mean, sigma=updated.std, desc=(t + 1.0) / 2.0), updated


# ============================================================================
# Softmax / cross-entropy
# ============================================================================

def softmax_probs(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=DTYPE)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got {labels.min()}..{labels.max()}")
    return labels


def noiretrieval_loss(logits, labels) -> Tuple[float, np.ndarray]:
    """Mean negative log-softmax at the label column; gradient (P - onehot) / N."""
    logits = np.asarray(logits, dtype=DTYPE)
    labels = _check_labels(labels, logits.shape[1])
    n = logits.shape[0]
    rows = np.arange(n)
    top = logits.max(axis=1)
    lse = top + np.log(np.exp(logits - top[:, None]).sum(axis=1))
    loss = float(np.mean(lse - logits[rows, labels]))
    grad = softmax_probs(logits)
    grad[rows, labels] -= 1.0
    return loss, grad / n


# ============================================================================
# Margin heads
# ============================================================================

def _target_angles(cosines: np.ndarray, labels: np.ndarray):
    rows = np.arange(cosines.shape[0])
    raw = cosines[rows, labels]
    clipped = np.clip(raw, -1.0 + COS_CLIP, 1.0 - COS_CLIP)
    inside = (raw > -1.0 + COS_CLIP) & (raw < 1.0 - COS_CLIP)
    return rows, clipped, np.arccos(clipped), inside


def noiretrieval_logits(cosines, labels, desc, cfg: LossConfig) -> np.ndarray:
    """s cos(desc) cos(theta_y + m) at the label, s cos(theta_j) elsewhere."""
    cosines = np.asarray(cosines, dtype=DTYPE)
    labels = _check_labels(labels, cosines.shape[1])
    desc = np.asarray(desc, dtype=DTYPE).reshape(-1)
    rows, _, theta, _ = _target_angles(cosines, labels)
    logits = cfg.s * cosines
    logits[rows, labels] = cfg.s * np.cos(desc) * np.cos(theta + cfg.m)
    return logits


def noiretrieval_logits_backward(grad_logits, cosines, labels, desc, cfg: LossConfig) -> np.ndarray:
    cosines = np.asarray(cosines, dtype=DTYPE)
    labels = _check_labels(labels, cosines.shape[1])
    desc = np.asarray(desc, dtype=DTYPE).reshape(-1)
    rows, _, theta, inside = _target_angles(cosines, labels)
    grad = cfg.s * np.asarray(grad_logits, dtype=DTYPE)
    # d cos(theta + m) / d cos(theta) = sin(theta + m) / sin(theta)
    slope = cfg.s * np.cos(desc) * np.sin(theta + cfg.m) / np.sin(theta)
    grad[rows, labels] = np.where(inside, grad_logits[rows, labels] * slope, 0.0)
    return grad


def adaface_logits(cosines, labels, desc, cfg: LossConfig) -> np.ndarray:
    """s (cos(theta_y + g_ang m) - g_add m) at the label, g_ang = 1 - 2 desc, g_add = 2 desc."""
    cosines = np.asarray(cosines, dtype=DTYPE)
    labels = _check_labels(labels, cosines.shape[1])
    desc = np.asarray(desc, dtype=DTYPE).reshape(-1)
    rows, _, theta, _ = _target_angles(cosines, labels)
    g_ang = -(2.0 * desc - 1.0)
    g_add = (2.0 * desc - 1.0) + 1.0
    logits = cfg.s * cosines
    logits[rows, labels] = cfg.s * (np.cos(theta + g_ang * cfg.m) - g_add * cfg.m)
    return logits


def adaface_logits_backward(grad_logits, cosines, labels, desc, cfg: LossConfig) -> np.ndarray:
    cosines = np.asarray(cosines, dtype=DTYPE)
    labels = _check_labels(labels, cosines.shape[1])
    desc = np.asarray(desc, dtype=DTYPE).reshape(-1)
    rows, _, theta, inside = _target_angles(cosines, labels)
    g_ang = -(2.0 * desc - 1.0)
    grad = cfg.s * np.asarray(grad_logits, dtype=DTYPE)
    slope = cfg.s * np.sin(theta + g_ang * cfg.m) / np.sin(theta)
    grad[rows, labels] = np.where(inside, grad_logits[rows, labels] * slope, 0.0)
    return grad


def normalized_softmax_loss(cosines, labels, s: float) -> Tuple[float, np.ndarray]:
    """Cross-entropy over s * cos(theta); returns (loss, grad wrt cosines)."""
    cosines = np.asarray(cosines, dtype=DTYPE)
    loss, grad_logits = noiretrieval_loss(s * cosines, labels)
    return loss, s * grad_logits


def classification_loss(kind: str, cosines, labels, desc, cfg: LossConfig) -> Tuple[float, np.ndarray]:
    """Dispatch on the configured head; returns (loss, grad wrt cosines)."""
    if kind == 'normsoftmax':
        return normalized_softmax_loss(cosines, labels, cfg.s)
    if kind == 'noiretrieval':
        logits = noiretrieval_logits(cosines, labels, desc, cfg)
        loss, grad_logits = noiretrieval_loss(logits, labels)
        return loss, noiretrieval_logits_backward(grad_logits, cosines, labels, desc, cfg)
    if kind in ('adaface', 'adaface_ema'):
        logits = adaface_logits(cosines, labels, desc, cfg)
        loss, grad_logits = noiretrieval_loss(logits, labels)
        return loss, adaface_logits_backward(grad_logits, cosines, labels, desc, cfg)
    raise ValueError(f"Unknown loss kind {kind!r}")


# ============================================================================
# Gradient scaling terms
# ============================================================================

class GstValue(NamedTuple):
    g: float
    clamped: bool


@dataclass
class GstResult:
    probs: np.ndarray
    g: np.ndarray
    clamped: np.ndarray


def _clamp_cos(cos_theta: float) -> Tuple[float, bool]:
    limit = 1.0 - GST_CLIP
    if abs(cos_theta) > limit:
        return math.copysign(limit, cos_theta), True
    return float(cos_theta), False


def gst_noiretrieval(p_target: float, cos_theta: float, desc: float, cfg: LossConfig) -> GstValue:
    """g = (P - 1) cos(desc) (cos m + cos(theta) sin m / sqrt(1 - cos^2 theta)) s."""
    c, clamped = _clamp_cos(cos_theta)
    slope = math.cos(cfg.m) + c * math.sin(cfg.m) / math.sqrt(1.0 - c * c)
    return GstValue((p_target - 1.0) * math.cos(desc) * slope * cfg.s, clamped)


def gst_adaface(p_target: float, cos_theta: float, desc: float, cfg: LossConfig) -> GstValue:
    """AdaFace counterpart: (P - 1) s sin(theta + g_ang m) / sin(theta)."""
    c, clamped = _clamp_cos(cos_theta)
    theta = math.acos(c)
    g_ang = -(2.0 * desc - 1.0)
    slope = math.sin(theta + g_ang * cfg.m) / math.sqrt(1.0 - c * c)
    return GstValue((p_target - 1.0) * slope * cfg.s, clamped)


def gradient_scaling_terms(cosines, labels, desc, cfg: LossConfig) -> GstResult:
    cosines = np.asarray(cosines, dtype=DTYPE)
    labels = _check_labels(labels, cosines.shape[1])
    desc = np.asarray(desc, dtype=DTYPE).reshape(-1)
    probs = softmax_probs(noiretrieval_logits(cosines, labels, desc, cfg))
    rows = np.arange(cosines.shape[0])
    values = [gst_noiretrieval(probs[i, labels[i]], cosines[i, labels[i]], desc[i], cfg) for i in rows]
    return GstResult(
        probs=probs,
        g=np.array([v.g for v in values], dtype=DTYPE),
        clamped=np.array([v.clamped for v in values], dtype=bool),
    )


# ============================================================================
# InfoNCE
# ============================================================================

def info_nce(anchors, positives, tau: float = 1.0) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    -(1/N) sum_i log softmax_j(a_i . p_j / tau)[i] for unit rows.

    Returns (loss, grad wrt anchors, grad wrt positives).
    """
    a = np.asarray(anchors, dtype=DTYPE)
    p = np.asarray(positives, dtype=DTYPE)
    if a.shape != p.shape or a.ndim != 2:
        raise ValueError(f"anchors {a.shape} and positives {p.shape} must be matching N x d matrices")
    n = a.shape[0]
    if n < 2:
        raise ValueError(f"info_nce needs at least 2 pairs, got {n}")
    sim = a @ p.T / tau
    top = sim.max(axis=1)
    lse = top + np.log(np.exp(sim - top[:, None]).sum(axis=1))
    loss = float(np.mean(lse - np.diag(sim)))
    grad_sim = (softmax_probs(sim) - np.eye(n)) / n
    return loss, grad_sim @ p / tau, grad_sim.T @ a / tau
