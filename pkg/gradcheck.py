"""
Finite-difference verification of every hand-written gradient.

Each suite compares analytic gradients against central differences and
reports the worst relative error

    max |analytic - numeric| / max(max |analytic|, max |numeric|)

over the checked entries. Large tensors are checked on sampled entries.
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from corruptions import make_pair
from encoder import init_model
from losses import LossConfig, classification_loss, info_nce, normalized_softmax_loss
from numerics import RngStream, conv2d, conv2d_backward, l2_normalize
from qcb import init_qcb_params, qcb_backward, qcb_forward
from trainer import StepOptions, TrainingPair, compute_loss_and_grads
from utils import log

COMPONENTS = ('conv', 'encoder', 'qcb', 'noiretrieval', 'infonce', 'normsoftmax', 'adaface')

TOLERANCES = {
    'conv': 1e-6,
    'encoder': 1e-4,
    'qcb': 1e-5,
    'noiretrieval': 1e-6,
    'infonce': 1e-6,
    'normsoftmax': 1e-6,
    'adaface': 1e-6,
}

SAMPLES_PER_TENSOR = 6


@dataclass
class ComponentReport:
    name: str
    max_rel_error: float
    tolerance: float
    checked: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < self.tolerance


@dataclass
class GradcheckReport:
    components: List[ComponentReport]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.components)

    def lines(self) -> List[str]:
        return [
            f"{c.name:<13} max_rel_error={c.max_rel_error:.3e} tol={c.tolerance:.0e} "
            f"entries={c.checked} {'PASS' if c.passed else 'FAIL'}"
            for c in self.components
        ]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def numeric_gradient(f: Callable[[], float], x: np.ndarray, indices: Sequence[int], step: float) -> np.ndarray:
    """Central differences of f() w.r.t. the flat entries of x (perturbed in place, then restored)."""
    flat = x.reshape(-1)
    out = np.zeros(len(indices), dtype=np.float64)
    for k, index in enumerate(indices):
        original = flat[index]
        flat[index] = original + step
        plus = f()
        flat[index] = original - step
        minus = f()
        flat[index] = original
        out[k] = (plus - minus) / (2.0 * step)
    return out


def pick_entries(rng: RngStream, size: int, count: int = SAMPLES_PER_TENSOR) -> np.ndarray:
    if size <= count:
        return np.arange(size)
    return np.sort(rng.choice(size, size=count, replace=False))


class _Collector:
    """Gathers analytic/numeric pairs of one component, optionally tampering the analytic side."""

    def __init__(self, name: str, tamper: Optional[str]):
        self.name = name
        self.tampered = tamper == name
        self.analytic: List[np.ndarray] = []
        self.numeric: List[np.ndarray] = []

    def add(self, analytic: np.ndarray, numeric: np.ndarray):
        analytic = np.asarray(analytic, dtype=np.float64).ravel()
        if self.tampered:
            analytic = analytic * 1.01 + 1e-3
        self.analytic.append(analytic)
        self.numeric.append(np.asarray(numeric, dtype=np.float64).ravel())

    def report(self) -> ComponentReport:
        analytic = np.concatenate(self.analytic)
        numeric = np.concatenate(self.numeric)
        return ComponentReport(self.name, relative_error(analytic, numeric), TOLERANCES[self.name], analytic.size)


# ============================================================================
# Suites
# ============================================================================

def check_conv(rng: RngStream, tamper: Optional[str] = None) -> ComponentReport:
    x = rng.normal(0.0, 1.0, (2, 3, 7, 7))
    kernels = rng.normal(0.0, 1.0, (4, 3, 3, 3))
    upstream = rng.normal(0.0, 1.0, conv2d(x, kernels, stride=2, pad=1).shape)
    grad_x, grad_k = conv2d_backward(upstream, x, kernels, stride=2, pad=1)

    def f():
        return float(np.sum(upstream * conv2d(x, kernels, stride=2, pad=1)))

    out = _Collector('conv', tamper)
    out.add(grad_x, numeric_gradient(f, x, range(x.size), 1e-5))
    out.add(grad_k, numeric_gradient(f, kernels, range(kernels.size), 1e-5))
    return out.report()


def _tiny_pairs(rng: RngStream, size: int = 16) -> List[TrainingPair]:
    pairs = []
    for label in range(2):
        high = rng.uniform(0.0, 1.0, (size, size, 3))
        _, low, specs = make_pair(high, rng.derive(f"pair/{label}"))
        pairs.append(TrainingPair(x_high=high, x_low=low, class_id=label, label=label, specs=specs))
    return pairs


def check_encoder(rng: RngStream, tamper: Optional[str] = None) -> ComponentReport:
    """Total training loss against every parameter tensor of a tiny model."""
    model = init_model(int(rng.integers(0, 2**31)), d=8, num_classes=3)
    # leave the identity-at-init point so the compensation path carries gradient
    model.qcb.fuse_w[...] = rng.normal(0.0, 0.05, model.qcb.fuse_w.shape)
    model.qcb.fuse_b[...] = rng.normal(0.0, 0.05, model.qcb.fuse_b.shape)
    pairs = _tiny_pairs(rng)
    cfg = LossConfig()
    options = StepOptions()

    first = compute_loss_and_grads(model, pairs, cfg, options)
    desc = first.desc.copy()
    analytic = first.grads.named()

    def f():
        return compute_loss_and_grads(model, pairs, cfg, options, desc_override=desc).report.total

    out = _Collector('encoder', tamper)
    for name, tensor in model.named().items():
        indices = pick_entries(rng, tensor.size)
        out.add(analytic[name].reshape(-1)[indices], numeric_gradient(f, tensor, indices, 1e-5))
    return out.report()


def check_qcb(rng: RngStream, tamper: Optional[str] = None) -> ComponentReport:
    params = init_qcb_params(rng)
    params.comp_b[...] = rng.normal(0.0, 0.1, params.comp_b.shape)
    params.fuse_w[...] = rng.normal(0.0, 0.1, params.fuse_w.shape)
    params.fuse_b[...] = rng.normal(0.0, 0.1, params.fuse_b.shape)
    f_low = np.abs(rng.normal(0.0, 1.0, (2, 64, 3, 3)))
    upstream = rng.normal(0.0, 1.0, (2, 64))

    cache = {}
    qcb_forward(f_low, params, cache)
    grads, grad_f_low = qcb_backward(upstream, cache, params)

    def f():
        return float(np.sum(upstream * qcb_forward(f_low, params)))

    out = _Collector('qcb', tamper)
    for name in ('comp_w', 'comp_b', 'fuse_w', 'fuse_b'):
        tensor = getattr(params, name)
        indices = pick_entries(rng, tensor.size, 12)
        out.add(getattr(grads, name).reshape(-1)[indices], numeric_gradient(f, tensor, indices, 1e-6))
    indices = pick_entries(rng, f_low.size, 12)
    out.add(grad_f_low.reshape(-1)[indices], numeric_gradient(f, f_low, indices, 1e-6))
    return out.report()


def _check_head(kind: str, rng: RngStream, tamper: Optional[str]) -> ComponentReport:
    cfg = LossConfig()
    cosines = rng.uniform(-0.9, 0.9, (4, 5))
    labels = rng.integers(0, 5, size=4)
    desc = rng.uniform(0.0, 1.0, 4)

    if kind == 'normsoftmax':
        def f():
            return normalized_softmax_loss(cosines, labels, cfg.s)[0]
        _, grad = normalized_softmax_loss(cosines, labels, cfg.s)
    else:
        def f():
            return classification_loss(kind, cosines, labels, desc, cfg)[0]
        _, grad = classification_loss(kind, cosines, labels, desc, cfg)

    out = _Collector(kind, tamper)
    out.add(grad, numeric_gradient(f, cosines, range(cosines.size), 1e-6))
    return out.report()


def check_infonce(rng: RngStream, tamper: Optional[str] = None) -> ComponentReport:
    anchors = l2_normalize(rng.normal(0.0, 1.0, (4, 6)))
    positives = l2_normalize(rng.normal(0.0, 1.0, (4, 6)))
    _, grad_a, grad_p = info_nce(anchors, positives, 1.0)

    def f():
        return info_nce(anchors, positives, 1.0)[0]

    out = _Collector('infonce', tamper)
    out.add(grad_a, numeric_gradient(f, anchors, range(anchors.size), 1e-6))
    out.add(grad_p, numeric_gradient(f, positives, range(positives.size), 1e-6))
    return out.report()


SUITES: Dict[str, Callable[[RngStream, Optional[str]], ComponentReport]] = {
    'conv': check_conv,
    'encoder': check_encoder,
    'qcb': check_qcb,
    'noiretrieval': lambda rng, tamper: _check_head('noiretrieval', rng, tamper),
    'infonce': check_infonce,
    'normsoftmax': lambda rng, tamper: _check_head('normsoftmax', rng, tamper),
    'adaface': lambda rng, tamper: _check_head('adaface', rng, tamper),
}


def run_gradcheck(seed: int = 0, tamper: Optional[str] = None,
                  components: Sequence[str] = COMPONENTS) -> GradcheckReport:
    """
    Run the suites; tamper names a component whose analytic gradient is
    perturbed before comparison (harness sensitivity check).
    """
    if tamper is not None and tamper not in COMPONENTS:
        raise ValueError(f"tamper must be one of {COMPONENTS}, got {tamper!r}")
    reports = []
    for name in components:
        if name not in SUITES:
            raise ValueError(f"unknown gradcheck component {name!r}")
        report = SUITES[name](RngStream(seed, f"gradcheck/{name}"), tamper)
        log('DEBUG', f"[Gradcheck] {name}: {report.max_rel_error:.3e} over {report.checked} entries")
        reports.append(report)
    return GradcheckReport(reports)
