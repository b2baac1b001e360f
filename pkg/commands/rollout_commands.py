import json
import logging

import torch

from config import ACTION_KEYS, ACTIONS, DEVICE
from models import ConfigError, InvalidActionError, validate_action
from utils.actionmap import load_table, nearest_action
from utils.dataset import load_manifest, read_trajectory_frames
from utils.evaluation import rollout
from utils.frames import ascii_preview, to_model_scale, write_png
from utils.run_config import resolve_device, resolve_path, write_run_record
from utils.worldmodel import load_checkpoint

logger = logging.getLogger(__name__)


def parse_actions(text):
    """'0,1,3' or 'left,right,down' -> [0, 1, 3]"""
    names = {name: action for action, name in ACTIONS.items()}
    actions = []
    for token in filter(None, (t.strip() for t in text.split(','))):
        try:
            actions.append(names[token] if token in names else validate_action(int(token)))
        except (ValueError, InvalidActionError):
            raise ConfigError(f"Invalid action in --actions: {token!r}")
    return actions


@torch.no_grad()
def inferred_action(model, table, x_curr, x_next, device):
    """Table action closest to the agent motion the model sees between two frames"""
    motion = model.encode_motion(torch.from_numpy(to_model_scale(x_curr)).to(device),
                                 torch.from_numpy(to_model_scale(x_next)).to(device))
    return nearest_action(table, motion[0])


def _interactive(model, table, x0, x1, out_dir, device):
    print(f"Keys: {', '.join(f'{k}={ACTIONS[a]}' for k, a in sorted(ACTION_KEYS.items()))}; q quits")
    frames = [x0, x1]
    actions = []
    while True:
        try:
            key = input('action> ').strip().lower()
        except EOFError:
            break
        if key in ('q', 'quit'):
            break
        if key not in ACTION_KEYS:
            print(f"Unknown key {key!r}")
            continue
        action = ACTION_KEYS[key]
        predicted = rollout(model, table, frames[-2], frames[-1], [action], device)[0]
        path = write_png(predicted, out_dir / f"step_{len(actions):03d}.png")
        seen = inferred_action(model, table, frames[-1], predicted, device)
        frames.append(predicted)
        actions.append(action)
        print(path)
        print(ascii_preview(predicted))
        print(f"requested {ACTIONS[action]}, predicted motion closest to {ACTIONS.get(seen, seen)}")
    return actions, frames[2:]


def run_rollout(args):
    """
    Recursive rollout from two dataset frames

    Arguments:
    --ckpt, --table: Trained artifacts
    --data: Dataset root or test split directory
    --actions: Comma list of action ids or names, or 'interactive'
    --out: Output directory
    """
    device = resolve_device(args.device)
    model, meta = load_checkpoint(resolve_path(args.ckpt, args.workdir), device)
    table = load_table(resolve_path(args.table, args.workdir))
    manifest = load_manifest(resolve_path(args.data, args.workdir), split=args.split)
    out_dir = resolve_path(args.out, args.workdir)
    out_dir.mkdir(parents=True, exist_ok=True)

    frames = read_trajectory_frames(manifest, args.traj)
    if not 0 <= args.start < len(frames) - 1:
        raise ConfigError(f"--start must lie in [0, {len(frames) - 2}]")
    x0, x1 = frames[args.start], frames[args.start + 1]

    if args.actions == 'interactive':
        actions, predicted = _interactive(model, table, x0, x1, out_dir, device)
    else:
        actions = parse_actions(args.actions)
        predicted = rollout(model, table, x0, x1, actions, device, strip_path=out_dir / 'rollout.png')
        for k, frame in enumerate(predicted):
            write_png(frame, out_dir / f"step_{k:03d}.png")

    with open(out_dir / 'rollout.json', 'w') as f:
        json.dump({'checkpoint_id': meta['checkpoint_id'], 'trajectory': args.traj, 'start': args.start,
                   'actions': actions}, f, indent=2)
    write_run_record(out_dir, 'rollout', {'ckpt': args.ckpt, 'table': args.table, 'data': args.data,
                                          'split': args.split, 'traj': args.traj, 'start': args.start,
                                          'actions': actions}, device=device)
    logger.info(f"Rolled out {len(predicted)} frames into {out_dir}")
    return 0


def register(subparsers):
    parser = subparsers.add_parser('rollout', help='Generate frames recursively from actions')
    parser.add_argument('--ckpt', required=True)
    parser.add_argument('--table', required=True)
    parser.add_argument('--data', required=True)
    parser.add_argument('--actions', required=True, help="Comma list like 1,1,3 or 'interactive'")
    parser.add_argument('--out', required=True)
    parser.add_argument('--split', default='test', choices=['train', 'test'])
    parser.add_argument('--traj', type=int, default=0)
    parser.add_argument('--start', type=int, default=0, help='Index of the first context frame')
    parser.add_argument('--device', default=DEVICE)
    parser.set_defaults(handler=run_rollout)
    return parser
