"""
qualret command line.

    python cli.py gen-data  --classes 32 --per-class 10 --seed 0 --out data
    python cli.py corrupt   --in a.ppm --out b.ppm --kind GaussianBlur --severity 3 --seed 7
    python cli.py train     --config cfg.json --epochs 2
    python cli.py eval      --ckpt runs/checkpoint.adpt --data data --protocol medium --noisy --seed 1
    python cli.py gradcheck --seed 0
    python cli.py gst-map   --theta-steps 64 --desc-steps 11 --out gst.csv
    python cli.py ablate    --kind modules --config cfg.json --seeds 0,1,2 --db runs/ledger.db
    python cli.py report    --db runs/ledger.db

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numerical failure.
"""

import sys
import csv
import json
import math
import asyncio
import argparse
from pathlib import Path
from typing import List, Optional

import numpy as np

from config import Config, LOSS_KINDS, QCB_SUPERVISION_KINDS
from utils import safe_print, log

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

GST_COLUMNS = ('theta', 'desc', 'P_target', 'g', 'abs_g')


class UsageErrorParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with EXIT_USAGE."""

    def error(self, message):
        self.print_usage(sys.stderr)
        safe_print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _float_list(text: str) -> List[float]:
    try:
        return [float(item) for item in text.split(',') if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}")


def _int_list(text: str) -> List[int]:
    try:
        return [int(item) for item in text.split(',') if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}")


def _name_list(text: str) -> List[str]:
    return [item.strip() for item in text.split(',') if item.strip()]


# flag -> (config key, type, help)
CONFIG_FLAGS = [
    ('--seed', 'seed', int, 'master seed'),
    ('--classes', 'classes', int, 'number of synthetic classes'),
    ('--per-class', 'per_class', int, 'images per class (query included)'),
    ('--distractors', 'distractors', int, 'distractor images (default: one per class)'),
    ('--data', 'data_dir', str, 'dataset directory'),
    ('--out', 'out_dir', str, 'output directory for checkpoint and metrics'),
    ('--batch', 'batch', int, 'pairs per batch'),
    ('--epochs', 'epochs', int, 'training epochs'),
    ('--lr0', 'lr0', float, 'initial learning rate'),
    ('--momentum', 'momentum', float, 'SGD momentum'),
    ('--weight-decay', 'weight_decay', float, 'weight decay'),
    ('--freeze', 'freeze', _name_list, 'comma separated parameter names or prefixes to keep fixed'),
    ('--s', 's', float, 'logit scale'),
    ('--m', 'm', float, 'angular margin'),
    ('--h', 'h', float, 'quality descriptor concentration'),
    ('--tau', 'tau', float, 'InfoNCE temperature'),
    ('--alpha', 'alpha', float, 'weight of the local-feature InfoNCE term'),
    ('--beta', 'beta', float, 'weight of the compensation-block term'),
    ('--ema-alpha', 'ema_alpha', float, 'momentum of the EMA norm statistics (adaface_ema)'),
    ('--d', 'd', int, 'descriptor dimension'),
    ('--scales', 'scales', _float_list, 'comma separated inference scales'),
]


def add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument('--config', help='JSON config file (flags override its values)')
    for flag, key, kind, text in CONFIG_FLAGS:
        parser.add_argument(flag, dest=key, type=kind, default=None, help=text)
    parser.add_argument('--loss', choices=LOSS_KINDS, default=None, help='classification head')
    parser.add_argument('--qcb', dest='qcb_enabled', action=argparse.BooleanOptionalAction, default=None,
                        help='enable the quality compensation block')
    parser.add_argument('--qcb-supervision', dest='qcb_supervision', choices=QCB_SUPERVISION_KINDS,
                        default=None, help='objective on the compensation branch')
    parser.add_argument('--debug', action='store_const', const=True, default=None, help='show DEBUG logs')


def config_from_args(args) -> Config:
    keys = [key for _, key, _, _ in CONFIG_FLAGS] + ['loss', 'qcb_enabled', 'qcb_supervision', 'debug']
    overrides = {key: getattr(args, key, None) for key in keys}
    return Config(config_file=args.config, overrides=overrides)


# ============================================================================
# gst-map
# ============================================================================

def gst_map_export(cfg, theta_steps: int, desc_steps: int, out, loss: str = 'noiretrieval',
                   coupled: bool = False) -> int:
    """
    Grid of the gradient scaling term over theta and desc for a 2-class
    setup whose non-target sits at pi - theta.

    P_target comes from the quality-free margin logit s cos(theta + m)
    unless coupled, which uses the loss's own quality-scaled target logit.
    Returns the number of rows written.
    """
    from losses import adaface_logits, gst_adaface, gst_noiretrieval, noiretrieval_logits, softmax_probs

    if theta_steps < 2 or desc_steps < 2:
        raise ValueError(f"theta_steps and desc_steps must be >= 2, got {theta_steps}, {desc_steps}")
    if loss not in ('noiretrieval', 'adaface'):
        raise ValueError(f"gst-map supports noiretrieval and adaface, got {loss!r}")
    gst = gst_noiretrieval if loss == 'noiretrieval' else gst_adaface
    coupled_logits = noiretrieval_logits if loss == 'noiretrieval' else adaface_logits

    labels = np.array([0])
    rows = 0
    with open(out, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(GST_COLUMNS)
        for theta in np.linspace(0.05, math.pi - 0.05, theta_steps):
            cos_theta = math.cos(theta)
            cosines = np.array([[cos_theta, -cos_theta]])
            for desc in np.linspace(0.0, 1.0, desc_steps):
                if coupled:
                    logits = coupled_logits(cosines, labels, np.array([desc]), cfg)
                else:
                    logits = noiretrieval_logits(cosines, labels, np.array([0.0]), cfg)
                p_target = float(softmax_probs(logits)[0, 0])
                g = gst(p_target, cos_theta, float(desc), cfg).g
                writer.writerow([repr(float(theta)), repr(float(desc)), repr(p_target), repr(g), repr(abs(g))])
                rows += 1
    return rows


# ============================================================================
# Commands
# ============================================================================

def cmd_gen_data(args) -> int:
    from synthset import generate_dataset

    config = config_from_args(args)
    manifest = generate_dataset(config.classes, config.per_class, config.seed, config.data_dir,
                                config.get_distractor_count())
    safe_print(json.dumps({'data_dir': str(config.data_dir), 'images': len(manifest.entries),
                           'queries': len(manifest.queries())}))
    return EXIT_OK


def cmd_corrupt(args) -> int:
    from corruptions import CorruptionSpec, apply_specs, draw_specs, specs_to_json
    from numerics import RngStream
    from synthset import load_image, save_image

    image = load_image(args.input)
    if args.random:
        specs = draw_specs(RngStream(args.seed, 'corrupt/cli'))
    else:
        if args.kind is None or args.severity is None:
            log('ERROR', "[CLI] corrupt needs --kind and --severity (or --random)")
            return EXIT_USAGE
        specs = [CorruptionSpec(kind=args.kind, severity=args.severity, seed=args.seed)]
    save_image(args.output, apply_specs(image, specs))
    safe_print(json.dumps(specs_to_json(specs)))
    return EXIT_OK


def cmd_train(args) -> int:
    from trainer import train

    result = train(config_from_args(args))
    safe_print(json.dumps({'checkpoint': str(result.checkpoint_path), 'metrics': str(result.metrics_path),
                           'final': result.metrics[-1] if result.metrics else None}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from encoder import load_checkpoint
    from retrieval import EvalRun, evaluate, evaluate_all, query_quality_stats, write_eval_report
    from synthset import Manifest

    model = load_checkpoint(args.ckpt)
    manifest = Manifest.read(args.data)
    scales = args.scales or None
    if args.protocol == 'all':
        runs = evaluate_all(model, manifest, scales, args.seed)
    else:
        runs = [evaluate(model, manifest, args.protocol, args.noisy, args.seed, scales)]

    if args.report:
        write_eval_report(runs, args.report, args.per_query)
    writer = csv.writer(sys.stdout, lineterminator='\n')
    writer.writerow(['protocol', 'noisy', 'n_queries', 'map'])
    for run in runs:
        row = run.to_row()
        writer.writerow([row['protocol'], row['noisy'], row['n_queries'], f"{row['map']:.6f}"])
    if args.quality_stats:
        h = model.meta.get('config', {}).get('h', 0.33)
        safe_print(json.dumps(query_quality_stats(model, manifest, args.seed, h)))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from gradcheck import run_gradcheck

    report = run_gradcheck(args.seed, tamper=args.tamper)
    for line in report.lines():
        safe_print(line)
    if not report.passed:
        log('ERROR', "[Gradcheck] at least one component exceeded its tolerance")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_gst_map(args) -> int:
    from trainer import loss_config

    rows = gst_map_export(loss_config(config_from_args(args)), args.theta_steps, args.desc_steps,
                          args.output, loss=args.gst_loss, coupled=args.coupled)
    log('INFO', f"[CLI] wrote {rows} gst rows to {args.output}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from ablation import format_report, run_ablation, summarize

    config = config_from_args(args)
    seeds = args.seeds or [config.seed]
    summaries = asyncio.run(run_ablation(args.kind, config, seeds, args.db))
    rows = [
        {'variant': s['variant'], 'protocol': protocol, 'noisy': noisy, 'map': value}
        for s in summaries for (protocol, noisy), value in s['final'].items()
    ]
    for line in format_report(summarize(rows)):
        safe_print(line)
    return EXIT_OK


def cmd_report(args) -> int:
    from ablation import load_report
    from database import Database

    if not Path(args.db).exists():
        raise FileNotFoundError(f"Ledger not found: {args.db}")
    for line in asyncio.run(load_report(args.db, args.sweep)):
        safe_print(line)
    if args.output:
        async def export():
            async with Database(args.db) as db:
                return await db.export_csv(args.output, args.sweep)
        asyncio.run(export())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = UsageErrorParser(prog='qualret', description='Quality-aware image retrieval lab')
    sub = parser.add_subparsers(dest='command', metavar='command')
    sub.required = True

    p = sub.add_parser('gen-data', help='render the synthetic retrieval dataset')
    p.add_argument('--config', help='JSON config file supplying classes, per_class, seed and distractors')
    p.add_argument('--classes', type=int, default=None, help='number of synthetic classes')
    p.add_argument('--per-class', dest='per_class', type=int, default=None, help='images per class (query included)')
    p.add_argument('--seed', type=int, default=None, help='dataset seed')
    p.add_argument('--distractors', type=int, default=None, help='distractor images (default: one per class)')
    p.add_argument('--out', dest='data_dir', default=None, help='dataset directory')
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser('corrupt', help='corrupt one PPM image')
    p.add_argument('--in', dest='input', required=True, help='input PPM')
    p.add_argument('--out', dest='output', required=True, help='output PPM')
    p.add_argument('--kind', help='corruption kind')
    p.add_argument('--severity', type=int, help='severity 1..5')
    p.add_argument('--seed', type=int, default=0, help='corruption seed')
    p.add_argument('--random', action='store_true', help='draw a random one-or-two kind composition')
    p.set_defaults(handler=cmd_corrupt)

    p = sub.add_parser('train', help='train a model')
    add_config_flags(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('eval', help='evaluate a checkpoint')
    p.add_argument('--ckpt', required=True, help='checkpoint file')
    p.add_argument('--data', required=True, help='dataset directory')
    p.add_argument('--protocol', choices=('easy', 'medium', 'hard', 'all'), default='medium',
                   help="protocol ('all' runs every protocol with clean and noisy queries)")
    p.add_argument('--noisy', action='store_true', help='corrupt the queries')
    p.add_argument('--seed', type=int, default=0, help='query corruption seed')
    p.add_argument('--scales', type=_float_list, default=None, help='override inference scales')
    p.add_argument('--report', help='write the CSV report here')
    p.add_argument('--per-query', help='write per-query AP as JSON lines here (with --report)')
    p.add_argument('--quality-stats', action='store_true', help='print clean vs noisy query norm statistics')
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('gradcheck', help='finite-difference gradient checks')
    p.add_argument('--seed', type=int, default=0, help='seed of the random test inputs')
    p.add_argument('--tamper', default=None, help='perturb the analytic gradient of one component')
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser('gst-map', help='export the gradient scaling term grid as CSV')
    p.add_argument('--config', help='JSON config file supplying s, m and h')
    p.add_argument('--s', type=float, default=None, help='logit scale')
    p.add_argument('--m', type=float, default=None, help='angular margin')
    p.add_argument('--h', type=float, default=None, help='quality descriptor concentration')
    p.add_argument('--theta-steps', type=int, default=64, help='grid points over theta')
    p.add_argument('--desc-steps', type=int, default=11, help='grid points over the quality descriptor')
    p.add_argument('--out', dest='output', default='gst_map.csv', help='CSV output path')
    p.add_argument('--loss', dest='gst_loss', choices=('noiretrieval', 'adaface'), default='noiretrieval',
                   help='loss whose scaling term is mapped')
    p.add_argument('--coupled', action='store_true',
                   help='compute P_target from the quality-scaled target logit')
    p.set_defaults(handler=cmd_gst_map)

    p = sub.add_parser('ablate', help='run an ablation sweep into the ledger')
    add_config_flags(p)
    p.add_argument('--kind', choices=('modules', 'weights'), required=True, help='sweep kind')
    p.add_argument('--seeds', type=_int_list, default=None, help='comma separated seeds')
    p.add_argument('--db', default='runs/ledger.db', help='ledger database')
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser('report', help='print the ablation comparison table')
    p.add_argument('--db', required=True, help='ledger database')
    p.add_argument('--sweep', default=None, help='only this sweep kind')
    p.add_argument('--out', dest='output', default=None, help='also export evaluations as CSV')
    p.set_defaults(handler=cmd_report)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except FloatingPointError as e:
        log('ERROR', f"[CLI] numerical failure: {e}")
        return EXIT_NUMERIC
    except (ValueError, OSError, json.JSONDecodeError, KeyError) as e:
        log('ERROR', f"[CLI] {type(e).__name__}: {e}")
        return EXIT_DATA


if __name__ == '__main__':
    sys.exit(main())
