"""
Paired-batch training loop.

Every sampled training image enters the network twice: clean (high
branch) and corrupted (low branch). The objective is

    total = L_Noi + alpha * L_Info1 + beta * L_Info2

where L_Noi is the configured margin softmax over both branches, L_Info1
aligns pooled f_local of low vs high and L_Info2 aligns the QCB output of
the low branch with the pooled f_global of the high branch. Optimisation
is SGD with momentum, weight decay and cosine learning-rate decay.
"""

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Set

import numpy as np

from config import Config
from corruptions import CorruptionSpec, make_pair, specs_to_json
from encoder import Model, backward, forward, head, head_backward, init_model, save_checkpoint
from losses import (
    LossConfig, NormStats, classification_loss, ema_quality_descriptor, info_nce,
    normalized_softmax_loss, quality_descriptor,
)
from numerics import (
    DTYPE, RngStream, ensure_finite, global_avg_pool, global_avg_pool_backward, l2_normalize,
    l2_normalize_backward,
)
from qcb import qcb_backward, qcb_forward
from retrieval import evaluate_all
from synthset import MANIFEST_NAME, Manifest, ManifestEntry, generate_dataset
from utils import is_debug, log

METRIC_COLUMNS = ('epoch', 'l_noi', 'l_info1', 'l_info2', 'total', 'desc_clean_mean', 'desc_noisy_mean', 'lr')
CHECKPOINT_NAME = 'checkpoint.adpt'
METRICS_NAME = 'metrics.csv'


# ============================================================================
# Data
# ============================================================================

@dataclass
class TrainingPair:
    x_high: np.ndarray
    x_low: np.ndarray
    class_id: int
    label: int  # dense index into the classifier columns
    specs: List[CorruptionSpec]


@dataclass
class TrainingSet:
    entries: List[ManifestEntry]
    images: np.ndarray
    labels: np.ndarray
    class_ids: List[int]
    by_class: List[np.ndarray]

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def from_manifest(cls, manifest: Manifest) -> 'TrainingSet':
        entries = manifest.training_entries()
        if not entries:
            raise ValueError("manifest holds no training images")
        class_ids = sorted({e.class_id for e in entries})
        dense = {cid: i for i, cid in enumerate(class_ids)}
        labels = np.array([dense[e.class_id] for e in entries], dtype=np.int64)
        images = np.stack([manifest.load(e) for e in entries])
        by_class = [np.flatnonzero(labels == i) for i in range(len(class_ids))]
        return cls(entries=entries, images=images, labels=labels, class_ids=class_ids, by_class=by_class)


def sample_indices(train_set: TrainingSet, batch_size: int, rng: RngStream) -> np.ndarray:
    """Class first, then an instance of that class, both uniform."""
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2, got {batch_size}")
    if train_set.num_classes < 2:
        raise ValueError(f"need at least 2 classes to build a batch, got {train_set.num_classes}")
    classes = rng.integers(0, train_set.num_classes, size=batch_size)
    picks = []
    for c in classes:
        members = train_set.by_class[int(c)]
        picks.append(int(members[int(rng.integers(0, len(members)))]))
    return np.array(picks, dtype=np.int64)


def build_batch(train_set: TrainingSet, batch_size: int, rng: RngStream) -> List[TrainingPair]:
    pairs = []
    for index in sample_indices(train_set, batch_size, rng):
        high, low, specs = make_pair(train_set.images[index], RngStream(rng.seed64(), 'pair'))
        label = int(train_set.labels[index])
        pairs.append(TrainingPair(x_high=high, x_low=low, class_id=train_set.class_ids[label],
                                  label=label, specs=specs))
    return pairs


# ============================================================================
# Optimiser state
# ============================================================================

@dataclass
class OptState:
    lr0: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    total_steps: int = 1
    step: int = 0
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    frozen: Set[str] = field(default_factory=set)

    def lr_at(self, t: int) -> float:
        return self.lr0 * (1.0 + math.cos(math.pi * t / self.total_steps)) / 2.0

    def apply(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> float:
        """In-place SGD update; returns the learning rate used."""
        lr = self.lr_at(self.step)
        for name, p in params.items():
            if name in self.frozen:
                continue
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = np.zeros_like(p)
            v *= self.momentum
            v += grads[name] + self.weight_decay * p
            p -= lr * v
        self.step += 1
        return lr


def resolve_frozen(patterns: Sequence[str], names: Sequence[str]) -> Set[str]:
    """'encoder' or 'encoder.conv1' freeze every tensor under that prefix."""
    frozen = set()
    for pattern in patterns:
        hits = {n for n in names if n == pattern or n.startswith(pattern + '.') or n.startswith(pattern + '_')}
        if not hits:
            raise ValueError(f"freeze entry {pattern!r} matches no parameter")
        frozen |= hits
    return frozen


# ============================================================================
# Loss and gradients
# ============================================================================

@dataclass
class StepOptions:
    loss: str = 'noiretrieval'
    qcb_enabled: bool = True
    qcb_supervision: str = 'infonce'
    ema_alpha: float = 0.01
    norm_stats: NormStats = field(default_factory=NormStats)

    @classmethod
    def from_config(cls, config: Config) -> 'StepOptions':
        return cls(loss=config.loss, qcb_enabled=config.qcb_enabled,
                   qcb_supervision=config.qcb_supervision, ema_alpha=config.ema_alpha)


@dataclass
class LossReport:
    l_noi: float
    l_info1: float
    l_info2: float
    total: float
    desc_clean_mean: float
    desc_noisy_mean: float
    lr: float = 0.0
    batch_id: int = 0


@dataclass
class StepResult:
    report: LossReport
    grads: Model
    desc: np.ndarray
    norm_stats: NormStats


def loss_config(config: Config) -> LossConfig:
    return LossConfig(s=config.s, m=config.m, h=config.h, tau=config.tau,
                      alpha=config.alpha, beta=config.beta)


def _finite_share(x: np.ndarray) -> str:
    return f"{int(np.isfinite(x).sum())}/{x.size} finite"


def _dump_batch(pairs: Sequence[TrainingPair], batch_id: int):
    log('ERROR', f"[Trainer] non-finite loss in batch {batch_id}")
    for i, pair in enumerate(pairs):
        log('ERROR', f"[Trainer]   pair {i}: class {pair.class_id} specs {json.dumps(specs_to_json(pair.specs))}")
        if is_debug():
            log('DEBUG', f"[Trainer]   pair {i}: x_high {_finite_share(pair.x_high)}, x_low {_finite_share(pair.x_low)}")


def compute_loss_and_grads(model: Model, pairs: Sequence[TrainingPair], cfg: LossConfig,
                           options: StepOptions, batch_id: int = 0,
                           desc_override: Optional[np.ndarray] = None) -> StepResult:
    """
    Forward both branches, evaluate the fused objective and backpropagate.

    Pure: model and options are not modified. desc_override pins the
    quality descriptor (it is gradient-stopped, so finite differences
    must hold it fixed).
    """
    n = len(pairs)
    if n < 2:
        raise ValueError(f"need at least 2 pairs per batch, got {n}")
    images = np.stack([p.x_high for p in pairs] + [p.x_low for p in pairs])
    labels = np.array([p.label for p in pairs] * 2, dtype=np.int64)

    out = forward(images, model.encoder)
    f_global_high, f_global_low = out.f_global[:n], out.f_global[n:]
    pooled_global_high = global_avg_pool(f_global_high)

    qcb_cache = {}
    if options.qcb_enabled:
        f_new_low = qcb_forward(f_global_low, model.qcb, qcb_cache)
    else:
        f_new_low = global_avg_pool(f_global_low)
    f_new = np.concatenate([pooled_global_high, f_new_low])

    head_cache = {}
    f_all, raw_norm = head(out, f_new, model.encoder, head_cache)

    norm_stats = options.norm_stats
    if desc_override is not None:
        desc = np.asarray(desc_override, dtype=DTYPE)
    elif options.loss == 'adaface_ema':
        quality, norm_stats = ema_quality_descriptor(raw_norm, options.norm_stats, cfg.h, options.ema_alpha)
        desc = quality.desc
    else:
        desc = quality_descriptor(raw_norm, cfg.h).desc

    cosines = model.head.cosines(f_all)
    l_noi, grad_cos = classification_loss(options.loss, cosines, labels, desc, cfg)
    grad_f_all, head_grads = model.head.backward(grad_cos, f_all)

    # L_Info1: pooled f_local, low anchors against high positives
    pooled_local = global_avg_pool(out.f_local)
    l_info1, g_anchor, g_positive = info_nce(
        l2_normalize(pooled_local[n:]), l2_normalize(pooled_local[:n]), cfg.tau)
    grad_pooled_local = cfg.alpha * np.concatenate([
        l2_normalize_backward(g_positive, pooled_local[:n]),
        l2_normalize_backward(g_anchor, pooled_local[n:]),
    ])

    grad_f_new_low = np.zeros_like(f_new_low)
    grad_pooled_global_high = np.zeros_like(pooled_global_high)
    aux_grads = model.aux.zeros_like() if model.aux is not None else None
    l_info2 = 0.0
    if options.qcb_enabled:
        if options.qcb_supervision == 'crossentropy':
            if model.aux is None:
                raise ValueError("crossentropy QCB supervision needs a model with an auxiliary head")
            unit_new = l2_normalize(f_new_low)
            l_info2, grad_aux_cos = normalized_softmax_loss(model.aux.cosines(unit_new), labels[n:], cfg.s)
            grad_unit, aux_grads = model.aux.backward(grad_aux_cos, unit_new)
            aux_grads.W *= cfg.beta
            grad_f_new_low += cfg.beta * l2_normalize_backward(grad_unit, f_new_low)
        else:
            l_info2, g_anchor, g_positive = info_nce(
                l2_normalize(f_new_low), l2_normalize(pooled_global_high), cfg.tau)
            grad_f_new_low += cfg.beta * l2_normalize_backward(g_anchor, f_new_low)
            grad_pooled_global_high += cfg.beta * l2_normalize_backward(g_positive, pooled_global_high)

    total = l_noi + cfg.alpha * l_info1 + cfg.beta * l_info2
    try:
        ensure_finite(np.asarray(total), f"training loss in batch {batch_id}")
    except FloatingPointError:
        _dump_batch(pairs, batch_id)
        raise

    grad_proj_w, grad_proj_b, grad_local_map, grad_f_new = head_backward(grad_f_all, head_cache, model.encoder)
    grad_local_map += global_avg_pool_backward(grad_pooled_local, out.f_local.shape)

    grad_pooled_global_high += grad_f_new[:n]
    grad_f_new_low += grad_f_new[n:]
    grad_global_high = global_avg_pool_backward(grad_pooled_global_high, f_global_high.shape)
    if options.qcb_enabled:
        qcb_grads, grad_global_low = qcb_backward(grad_f_new_low, qcb_cache, model.qcb)
    else:
        qcb_grads = model.qcb.zeros_like()
        grad_global_low = global_avg_pool_backward(grad_f_new_low, f_global_low.shape)

    encoder_grads = backward((grad_local_map, np.concatenate([grad_global_high, grad_global_low])),
                             out.cache, model.encoder)
    encoder_grads.proj_w = grad_proj_w
    encoder_grads.proj_b = grad_proj_b

    report = LossReport(
        l_noi=float(l_noi), l_info1=float(l_info1), l_info2=float(l_info2), total=float(total),
        desc_clean_mean=float(desc[:n].mean()), desc_noisy_mean=float(desc[n:].mean()),
        batch_id=batch_id,
    )
    grads = Model(encoder=encoder_grads, qcb=qcb_grads, head=head_grads, aux=aux_grads)
    return StepResult(report=report, grads=grads, desc=desc, norm_stats=norm_stats)


def train_step(model: Model, pairs: Sequence[TrainingPair], cfg: LossConfig,
               opt: OptState, options: StepOptions, batch_id: int = 0) -> LossReport:
    """One SGD update of model in place; classifier columns are renormalised afterwards."""
    result = compute_loss_and_grads(model, pairs, cfg, options, batch_id)
    result.report.lr = opt.apply(model.named(), result.grads.named())
    options.norm_stats = result.norm_stats
    model.head.renormalize()
    if model.aux is not None:
        model.aux.renormalize()
    return result.report


# ============================================================================
# Training loop
# ============================================================================

@dataclass
class TrainResult:
    model: Model
    metrics: List[Dict[str, float]]
    checkpoint_path: Optional[Path] = None
    metrics_path: Optional[Path] = None
    initial_eval: Optional[list] = None
    final_eval: Optional[list] = None


def ensure_dataset(config: Config) -> Manifest:
    data_dir = Path(config.data_dir)
    if not (data_dir / MANIFEST_NAME).exists():
        log('INFO', f"[Trainer] no dataset in {data_dir}, generating one")
        generate_dataset(config.classes, config.per_class, config.seed, data_dir, config.distractors)
    return Manifest.read(data_dir)


def write_metrics(path: Path, rows: Sequence[Dict[str, float]]):
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow([row['epoch']] + [repr(float(row[c])) for c in METRIC_COLUMNS[1:]])


def train(config: Config, out_dir=None, evaluate: bool = False,
          on_epoch: Optional[Callable[[Dict[str, float]], None]] = None) -> TrainResult:
    """
    Run config.epochs epochs, write metrics.csv and checkpoint.adpt.

    With evaluate=True the initial and final models are scored on all
    protocols (clean and noisy queries) and returned with the result.
    """
    manifest = ensure_dataset(config)
    train_set = TrainingSet.from_manifest(manifest)
    options = StepOptions.from_config(config)
    cfg = loss_config(config)

    aux_head = options.qcb_enabled and options.qcb_supervision == 'crossentropy'
    model = init_model(config.seed, config.d, train_set.num_classes, aux_head=aux_head)
    steps_per_epoch = math.ceil(len(train_set) / config.batch)
    opt = OptState(lr0=config.lr0, momentum=config.momentum, weight_decay=config.weight_decay,
                   total_steps=config.epochs * steps_per_epoch,
                   frozen=resolve_frozen(config.freeze, list(model.named())))

    result = TrainResult(model=model, metrics=[])
    if evaluate:
        result.initial_eval = evaluate_all(model, manifest, config.scales, config.seed,
                                           qcb_enabled=options.qcb_enabled)

    log('INFO', f"[Trainer] {len(train_set)} images, {train_set.num_classes} classes, "
                f"{config.epochs} epochs x {steps_per_epoch} steps, loss={options.loss}, "
                f"qcb={'on' if options.qcb_enabled else 'off'}")

    for epoch in range(1, config.epochs + 1):
        reports = []
        for _ in range(steps_per_epoch):
            batch_id = opt.step
            pairs = build_batch(train_set, config.batch, RngStream(config.seed, f"batch/{batch_id}"))
            reports.append(train_step(model, pairs, cfg, opt, options, batch_id))
        row = {'epoch': epoch}
        for column in METRIC_COLUMNS[1:-1]:
            row[column] = float(np.mean([getattr(r, column) for r in reports]))
        row['lr'] = reports[-1].lr
        result.metrics.append(row)
        log('INFO', f"[Trainer] epoch {epoch}/{config.epochs} total={row['total']:.4f} "
                    f"l_noi={row['l_noi']:.4f} l_info1={row['l_info1']:.4f} l_info2={row['l_info2']:.4f} "
                    f"desc clean/noisy={row['desc_clean_mean']:.3f}/{row['desc_noisy_mean']:.3f}")
        if on_epoch is not None:
            on_epoch(row)

    out = Path(out_dir if out_dir is not None else config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.metrics_path = out / METRICS_NAME
    result.checkpoint_path = out / CHECKPOINT_NAME
    write_metrics(result.metrics_path, result.metrics)
    model.meta['class_ids'] = train_set.class_ids
    save_checkpoint(result.checkpoint_path, model, config.to_dict())
    log('INFO', f"[Trainer] wrote {result.checkpoint_path} and {result.metrics_path}")

    if evaluate:
        result.final_eval = evaluate_all(model, manifest, config.scales, config.seed,
                                         qcb_enabled=options.qcb_enabled)
    return result
