import logging

from config import DEVICE
from utils.actionmap import build_table, save_table
from utils.dataset import load_manifest, sample_demonstrations
from utils.run_config import resolve_device, resolve_path, write_run_record
from utils.worldmodel import load_checkpoint

logger = logging.getLogger(__name__)


def build_action_table(args):
    """
    Build the action-transformation table from a few labelled demonstrations

    Arguments:
    --ckpt: Trained checkpoint
    --data: Dataset root or train split directory
    --per-action: Demonstrations per action id
    --out: Table JSON path
    """
    device = resolve_device(args.device)
    model, meta = load_checkpoint(resolve_path(args.ckpt, args.workdir), device)
    manifest = load_manifest(resolve_path(args.data, args.workdir), split='train')
    demos = sample_demonstrations(manifest, args.per_action, args.seed,
                                  unobstructed_only=not args.include_blocked)
    table = build_table(demos, model, checkpoint_id=meta['checkpoint_id'])
    out_path = save_table(table, resolve_path(args.out, args.workdir))
    write_run_record(out_path.parent, 'build-table', {
        'ckpt': args.ckpt, 'data': args.data, 'per_action': args.per_action,
        'include_blocked': args.include_blocked, 'table': out_path.name,
    }, device=device, seed=args.seed)
    print(out_path)
    return 0


def register(subparsers):
    parser = subparsers.add_parser('build-table', help='Map action ids to agent transforms')
    parser.add_argument('--ckpt', required=True)
    parser.add_argument('--data', required=True)
    parser.add_argument('--per-action', type=int, default=1)
    parser.add_argument('--seed', type=int, default=0)
    parser.add_argument('--out', required=True)
    parser.add_argument('--include-blocked', action='store_true',
                        help='Also draw transitions that left the frame unchanged')
    parser.add_argument('--device', default=DEVICE)
    parser.set_defaults(handler=build_action_table)
    return parser
