import json
import logging

import numpy as np

from config import DEVICE
from utils.actionmap import load_table
from utils.dataset import load_manifest, read_trajectory_frames
from utils.evaluation import agent_map_correlation, compare_reports, evaluate_model, viz_agent_map
from utils.frames import write_png
from utils.run_config import resolve_device, resolve_path, write_run_record
from utils.worldmodel import load_checkpoint

logger = logging.getLogger(__name__)


def _load_model_and_table(args, device):
    model, meta = load_checkpoint(resolve_path(args.ckpt, args.workdir), device)
    table = load_table(resolve_path(args.table, args.workdir))
    if table.checkpoint_id and table.checkpoint_id != meta['checkpoint_id']:
        logger.warning(f"Table was built from checkpoint {table.checkpoint_id}, "
                       f"evaluating {meta['checkpoint_id']}")
    return model, meta, table


def evaluate(args):
    """
    One-step prediction metrics over the test split

    Arguments:
    --ckpt, --table: Trained artifacts
    --data: Dataset root or test split directory
    --out: Directory for eval_report.json and eval_triplets.csv
    """
    device = resolve_device(args.device)
    model, meta, table = _load_model_and_table(args, device)
    manifest = load_manifest(resolve_path(args.data, args.workdir), split='test')
    out_dir = resolve_path(args.out, args.workdir)
    report = evaluate_model(model, table, manifest, out_dir=out_dir, model_id=meta['checkpoint_id'],
                            device=device)
    write_run_record(out_dir, 'eval', {'ckpt': args.ckpt, 'table': args.table, 'data': args.data},
                     device=device)
    print(json.dumps(report, indent=2))
    return 0


def viz_maps(args):
    """
    Agent-map figure and centroid correlation against true agent positions

    Arguments:
    --ckpt: Trained checkpoint
    --data: Dataset root or test split directory
    --out: Output directory
    """
    device = resolve_device(args.device)
    model, _ = load_checkpoint(resolve_path(args.ckpt, args.workdir), device)
    manifest = load_manifest(resolve_path(args.data, args.workdir), split='test')
    out_dir = resolve_path(args.out, args.workdir)
    out_dir.mkdir(parents=True, exist_ok=True)

    frames = read_trajectory_frames(manifest, args.traj)
    picks = np.linspace(0, len(frames) - 1, num=min(args.n_frames, len(frames))).round().astype(int)
    write_png(viz_agent_map(model, [frames[i] for i in picks], device), out_dir / 'agent_maps.png')

    correlation = agent_map_correlation(model, manifest, max_frames=args.max_frames, device=device)
    with open(out_dir / 'agent_map_correlation.json', 'w') as f:
        json.dump(correlation, f, indent=2)
    write_run_record(out_dir, 'viz-maps', {'ckpt': args.ckpt, 'data': args.data, 'traj': args.traj,
                                           'n_frames': args.n_frames, 'max_frames': args.max_frames},
                     device=device)
    print(json.dumps(correlation, indent=2))
    return 0


def compare(args):
    """Compare an STN eval report against a cross-convolution ablation report"""
    reports = []
    for path in (args.stn, args.no_stn):
        with open(resolve_path(path, args.workdir)) as f:
            reports.append(json.load(f))
    comparison = compare_reports(*reports)
    if args.out:
        out_path = resolve_path(args.out, args.workdir)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, 'w') as f:
            json.dump(comparison, f, indent=2)
    print(json.dumps(comparison, indent=2))
    return 0


def register(subparsers):
    parser = subparsers.add_parser('eval', help='One-step prediction metrics on the test split')
    parser.add_argument('--ckpt', required=True)
    parser.add_argument('--table', required=True)
    parser.add_argument('--data', required=True)
    parser.add_argument('--out', required=True)
    parser.add_argument('--device', default=DEVICE)
    parser.set_defaults(handler=evaluate)

    parser = subparsers.add_parser('viz-maps', help='Visualise agent feature maps')
    parser.add_argument('--ckpt', required=True)
    parser.add_argument('--data', required=True)
    parser.add_argument('--out', required=True)
    parser.add_argument('--traj', type=int, default=0, help='Trajectory shown in the figure')
    parser.add_argument('--n-frames', type=int, default=8)
    parser.add_argument('--max-frames', type=int, default=200, help='Frames used for the correlation')
    parser.add_argument('--device', default=DEVICE)
    parser.set_defaults(handler=viz_maps)

    parser = subparsers.add_parser('compare', help='Compare STN and ablation eval reports')
    parser.add_argument('--stn', required=True)
    parser.add_argument('--no-stn', required=True)
    parser.add_argument('--out', default=None)
    parser.set_defaults(handler=compare)
    return parser
