"""
Cosine ranking and the Easy / Medium / Hard mAP protocols.

The database is always described from clean images. With noisy queries
every query is corrupted first, using specs drawn from a dedicated
evaluation seed (never a training draw).
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import INFERENCE_SCALES
from corruptions import make_pair
from encoder import Model, describe, load_checkpoint, multiscale_descriptors
from losses import quality_descriptor
from numerics import RngStream
from synthset import Manifest, RetrievalGroundTruth
from utils import log

PROTOCOLS = ('easy', 'medium', 'hard')
EXTRACT_CHUNK = 64


class EmptyPositivesError(ValueError):
    """Query has no positive left once the ignored ids are removed."""


@dataclass
class EvalRun:
    protocol: str
    noisy_queries: bool
    per_query_ap: np.ndarray
    query_ids: List[int] = field(default_factory=list)
    skipped: List[int] = field(default_factory=list)

    @property
    def map(self) -> float:
        if self.per_query_ap.size == 0:
            return float('nan')
        return float(self.per_query_ap.mean())

    def to_row(self) -> Dict[str, object]:
        return {
            'protocol': self.protocol,
            'noisy': int(self.noisy_queries),
            'n_queries': len(self.query_ids),
            'map': self.map,
        }


# ============================================================================
# Ranking and AP
# ============================================================================

def rank(query: np.ndarray, db: np.ndarray, ids: Optional[Sequence[int]] = None) -> np.ndarray:
    """Ids by descending dot product, ties broken by ascending id."""
    db = np.asarray(db, dtype=np.float64)
    if db.ndim != 2 or db.shape[0] == 0:
        raise ValueError(f"rank needs a non-empty M x d database, got shape {db.shape}")
    ids = np.arange(db.shape[0]) if ids is None else np.asarray(ids)
    if ids.shape[0] != db.shape[0]:
        raise ValueError(f"{ids.shape[0]} ids for {db.shape[0]} database rows")
    scores = db @ np.asarray(query, dtype=np.float64)
    return ids[np.lexsort((ids, -scores))]


def average_precision(ranked: Sequence[int], positives, junk=frozenset()) -> float:
    """Mean precision@k over the ranks holding a positive, junk removed from the ranking."""
    junk = frozenset(junk)
    positives = frozenset(positives) - junk
    if not positives:
        raise EmptyPositivesError("no positives left after removing ignored ids")
    hits = 0
    rank_k = 0
    total = 0.0
    for item in ranked:
        if item in junk:
            continue
        rank_k += 1
        if item in positives:
            hits += 1
            total += hits / rank_k
    return total / len(positives)


def protocol_sets(gt: RetrievalGroundTruth, protocol: str) -> Tuple[FrozenSet[int], FrozenSet[int]]:
    """(positives, ignored) for one query under a protocol."""
    protocol = protocol.lower()
    if protocol == 'easy':
        return gt.easy_ids, gt.hard_ids | gt.junk_ids
    if protocol == 'medium':
        return gt.easy_ids | gt.hard_ids, gt.junk_ids
    if protocol == 'hard':
        return gt.hard_ids, gt.easy_ids | gt.junk_ids
    raise ValueError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")


def evaluate_descriptors(query_desc: np.ndarray, db_desc: np.ndarray, db_ids: Sequence[int],
                         ground_truths: Sequence[RetrievalGroundTruth], protocol: str,
                         noisy_queries: bool = False) -> EvalRun:
    """Score precomputed descriptors; queries without positives are skipped and reported."""
    protocol = protocol.lower()
    aps, query_ids, skipped = [], [], []
    for desc, gt in zip(query_desc, ground_truths):
        positives, ignored = protocol_sets(gt, protocol)
        try:
            ap = average_precision(rank(desc, db_desc, db_ids).tolist(), positives, ignored)
        except EmptyPositivesError:
            log('WARN', f"[Retrieval] query {gt.query_id} has no {protocol} positives, skipped")
            skipped.append(gt.query_id)
            continue
        aps.append(ap)
        query_ids.append(gt.query_id)
    return EvalRun(protocol=protocol, noisy_queries=noisy_queries,
                   per_query_ap=np.array(aps, dtype=np.float64), query_ids=query_ids, skipped=skipped)


# ============================================================================
# Descriptor extraction
# ============================================================================

def extract_descriptors(model: Model, images: Sequence[np.ndarray], scales: Sequence[float],
                        qcb_enabled: bool = True) -> np.ndarray:
    """Multi-scale descriptors, images grouped by size and processed in chunks."""
    out = np.zeros((len(images), model.encoder.dim), dtype=np.float64)
    groups: Dict[tuple, List[int]] = {}
    for i, img in enumerate(images):
        groups.setdefault(np.shape(img), []).append(i)
    for indices in groups.values():
        for start in range(0, len(indices), EXTRACT_CHUNK):
            chunk = indices[start:start + EXTRACT_CHUNK]
            out[chunk] = multiscale_descriptors([images[i] for i in chunk], model, scales, qcb_enabled)
    return out


def query_images(manifest: Manifest, noisy: bool, corruption_seed: int) -> List[np.ndarray]:
    images = []
    for query in manifest.queries():
        image = manifest.load(query)
        if noisy:
            _, image, _ = make_pair(image, RngStream(corruption_seed, f"query/{query.id}"))
        images.append(image)
    return images


def _resolve_model(checkpoint: Union[str, Path, Model]) -> Model:
    if isinstance(checkpoint, Model):
        return checkpoint
    return load_checkpoint(checkpoint)


def _model_setting(model: Model, key: str, default):
    return model.meta.get('config', {}).get(key, default)


def evaluate(checkpoint: Union[str, Path, Model], manifest: Manifest, protocol: str,
             noisy_queries: bool, corruption_seed: int,
             scales: Optional[Sequence[float]] = None) -> EvalRun:
    model = _resolve_model(checkpoint)
    scales = scales or _model_setting(model, 'scales', INFERENCE_SCALES)
    qcb_enabled = _model_setting(model, 'qcb_enabled', True)
    database = manifest.database()
    db_desc = extract_descriptors(model, [manifest.load(e) for e in database], scales, qcb_enabled)
    q_desc = extract_descriptors(model, query_images(manifest, noisy_queries, corruption_seed), scales, qcb_enabled)
    truths = [manifest.ground_truth(q.id) for q in manifest.queries()]
    run = evaluate_descriptors(q_desc, db_desc, [e.id for e in database], truths, protocol, noisy_queries)
    log('INFO', f"[Retrieval] {run.protocol} {'noisy' if noisy_queries else 'clean'} mAP={run.map:.4f}")
    return run


def evaluate_all(checkpoint: Union[str, Path, Model], manifest: Manifest,
                 scales: Optional[Sequence[float]], corruption_seed: int,
                 qcb_enabled: Optional[bool] = None) -> List[EvalRun]:
    """Every protocol with clean and noisy queries; database described once."""
    model = _resolve_model(checkpoint)
    scales = scales or _model_setting(model, 'scales', INFERENCE_SCALES)
    if qcb_enabled is None:
        qcb_enabled = _model_setting(model, 'qcb_enabled', True)
    database = manifest.database()
    db_desc = extract_descriptors(model, [manifest.load(e) for e in database], scales, qcb_enabled)
    db_ids = [e.id for e in database]
    truths = [manifest.ground_truth(q.id) for q in manifest.queries()]

    runs = []
    for noisy in (False, True):
        q_desc = extract_descriptors(model, query_images(manifest, noisy, corruption_seed), scales, qcb_enabled)
        for protocol in PROTOCOLS:
            runs.append(evaluate_descriptors(q_desc, db_desc, db_ids, truths, protocol, noisy))
    log('INFO', "[Retrieval] " + " ".join(
        f"{r.protocol}{'/noisy' if r.noisy_queries else ''}={r.map:.4f}" for r in runs))
    return runs


def query_quality_stats(checkpoint: Union[str, Path, Model], manifest: Manifest, corruption_seed: int,
                        h: float = 0.33, qcb_enabled: bool = True) -> Dict[str, float]:
    """Mean raw feature norm and quality descriptor of clean vs corrupted queries (single scale)."""
    model = _resolve_model(checkpoint)
    clean = np.stack(query_images(manifest, False, corruption_seed))
    noisy = np.stack(query_images(manifest, True, corruption_seed))
    _, clean_norms = describe(clean, model, qcb_enabled)
    _, noisy_norms = describe(noisy, model, qcb_enabled)
    desc = quality_descriptor(np.concatenate([clean_norms, noisy_norms]), h).desc
    n = len(clean_norms)
    return {
        'norm_clean_mean': float(clean_norms.mean()),
        'norm_noisy_mean': float(noisy_norms.mean()),
        'desc_clean_mean': float(desc[:n].mean()),
        'desc_noisy_mean': float(desc[n:].mean()),
    }


def write_eval_report(runs: Sequence[EvalRun], csv_path, jsonl_path=None):
    with open(csv_path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=['protocol', 'noisy', 'n_queries', 'map'], lineterminator='\n')
        writer.writeheader()
        for run in runs:
            row = run.to_row()
            row['map'] = repr(row['map'])
            writer.writerow(row)
    if jsonl_path is not None:
        with open(jsonl_path, 'w', encoding='utf-8', newline='\n') as f:
            for run in runs:
                for qid, ap in zip(run.query_ids, run.per_query_ap):
                    f.write(json.dumps({'protocol': run.protocol, 'noisy': run.noisy_queries,
                                        'query_id': qid, 'ap': float(ap)}) + '\n')
