"""
Ablation sweeps over loss heads, auxiliary objectives and loss weights.

Every variant x seed is trained with evaluation on, and the run, its
epoch metrics and its initial/final evaluations go to the ledger.
"""

import asyncio
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple

from config import Config
from database import Database
from retrieval import PROTOCOLS
from trainer import train
from utils import log

# variant name -> config changes; alpha/beta of None keep the base value
MODULE_VARIANTS: List[Tuple[str, Dict[str, Any]]] = [
    ('normsoftmax', {'loss': 'normsoftmax', 'qcb_enabled': False, 'alpha': 0.0, 'beta': 0.0}),
    ('adaface_ema', {'loss': 'adaface_ema', 'qcb_enabled': False, 'alpha': 0.0, 'beta': 0.0}),
    ('adaface', {'loss': 'adaface', 'qcb_enabled': False, 'alpha': 0.0, 'beta': 0.0}),
    ('noiretrieval', {'loss': 'noiretrieval', 'qcb_enabled': False, 'alpha': 0.0, 'beta': 0.0}),
    ('noiretrieval+info1', {'loss': 'noiretrieval', 'qcb_enabled': False, 'alpha': None, 'beta': 0.0}),
    ('noiretrieval+qcb_ce', {'loss': 'noiretrieval', 'qcb_enabled': True, 'qcb_supervision': 'crossentropy',
                             'alpha': 0.0, 'beta': None}),
    ('noiretrieval+qcb_infonce', {'loss': 'noiretrieval', 'qcb_enabled': True, 'qcb_supervision': 'infonce',
                                  'alpha': 0.0, 'beta': None}),
    ('noiretrieval+both', {'loss': 'noiretrieval', 'qcb_enabled': True, 'qcb_supervision': 'infonce',
                           'alpha': None, 'beta': None}),
]

WEIGHT_GRID = [(0.1, 0.1), (0.2, 0.2), (0.2, 0.5), (0.5, 0.5)]

SWEEP_KINDS = ('modules', 'weights')


def sweep_variants(kind: str, base: Config) -> List[Tuple[str, Dict[str, Any]]]:
    if kind == 'modules':
        variants = []
        for name, changes in MODULE_VARIANTS:
            resolved = dict(changes)
            for key in ('alpha', 'beta'):
                if resolved.get(key, 0.0) is None:
                    resolved[key] = base.get(key)
            variants.append((name, resolved))
        return variants
    if kind == 'weights':
        return [
            (f"alpha{alpha}_beta{beta}", {'loss': 'noiretrieval', 'qcb_enabled': True,
                                          'qcb_supervision': 'infonce', 'alpha': alpha, 'beta': beta})
            for alpha, beta in WEIGHT_GRID
        ]
    raise ValueError(f"ablation kind must be one of {SWEEP_KINDS}, got {kind!r}")


def variant_config(base: Config, changes: Dict[str, Any], seed: int, out_dir: Path) -> Config:
    """Each seed gets its own dataset directory so runs never share a mismatched manifest."""
    return base.replace(seed=seed, data_dir=str(Path(base.data_dir) / f"seed{seed}"),
                        out_dir=str(out_dir), **changes)


async def run_ablation(kind: str, base: Config, seeds: Sequence[int], db_path) -> List[Dict[str, Any]]:
    """Train and evaluate every variant for every seed; returns one summary per run."""
    variants = sweep_variants(kind, base)
    summaries = []
    async with Database(db_path) as db:
        for name, changes in variants:
            for seed in seeds:
                out_dir = Path(base.out_dir) / kind / name / f"seed{seed}"
                config = variant_config(base, changes, seed, out_dir)
                log('INFO', f"[Ablation] {kind}/{name} seed={seed}")

                run_id = await db.insert_run(name, seed, config.to_dict(), sweep=kind)
                result = await asyncio.to_thread(train, config, None, True)
                if run_id is None:
                    log('WARN', f"[Ablation] run {name}/{seed} trained but not recorded")
                    continue

                await db.set_checkpoint(run_id, str(result.checkpoint_path))
                for row in result.metrics:
                    await db.insert_epoch(run_id, row)
                for stage, runs in (('initial', result.initial_eval), ('final', result.final_eval)):
                    for run in runs or []:
                        await db.insert_evaluation(run_id, stage, run.protocol, run.noisy_queries,
                                                   len(run.query_ids), run.map)
                summaries.append({
                    'variant': name,
                    'seed': seed,
                    'run_id': run_id,
                    'final': {(r.protocol, r.noisy_queries): r.map for r in result.final_eval or []},
                })
    return summaries


def summarize(rows: Sequence[Dict[str, Any]]) -> Dict[str, Dict[Tuple[str, bool], float]]:
    """Mean mAP over seeds per variant and (protocol, noisy) cell, variants in ledger order."""
    cells: Dict[str, Dict[Tuple[str, bool], List[float]]] = {}
    for row in rows:
        per_variant = cells.setdefault(row['variant'], {})
        per_variant.setdefault((row['protocol'], bool(row['noisy'])), []).append(float(row['map']))
    return {
        variant: {cell: sum(values) / len(values) for cell, values in per_cell.items()}
        for variant, per_cell in cells.items()
    }


def format_report(table: Dict[str, Dict[Tuple[str, bool], float]]) -> List[str]:
    """Fixed-width comparison table, mAP in percent."""
    header = f"{'variant':<28}" + "".join(f"{p:>9}" for p in PROTOCOLS) + "".join(f"{'n-' + p:>11}" for p in PROTOCOLS)
    lines = [header, '-' * len(header)]
    for variant, cells in table.items():
        clean = "".join(f"{100 * cells.get((p, False), float('nan')):>9.2f}" for p in PROTOCOLS)
        noisy = "".join(f"{100 * cells.get((p, True), float('nan')):>11.2f}" for p in PROTOCOLS)
        lines.append(f"{variant:<28}{clean}{noisy}")
    return lines


async def load_report(db_path, sweep: str = None) -> List[str]:
    async with Database(db_path) as db:
        rows = await db.get_evaluations(sweep)
    return format_report(summarize(rows))
