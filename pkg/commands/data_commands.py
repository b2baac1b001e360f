import logging

from config import NUM_WORKERS, TRAJECTORY_LENGTH
from utils.dataset import generate
from utils.environments import ENVIRONMENTS
from utils.run_config import resolve_path, write_run_record

logger = logging.getLogger(__name__)


def gen_data(args):
    """
    Generate a trajectory dataset

    Arguments:
    --env: Environment name
    --n-traj: Number of trajectories (train and test together)
    --seed: Dataset seed
    --out: Output directory
    """
    out_dir = resolve_path(args.out, args.workdir)
    manifest = generate(args.env, args.n_traj, args.seed, out_dir, length=args.length, workers=args.workers)
    config = {'env': args.env, 'n_traj': args.n_traj, 'seed': args.seed, 'length': args.length}
    write_run_record(out_dir, 'gen-data', config, device='cpu', seed=args.seed)
    logger.info(f"Wrote {manifest.trajectory_count} training trajectories to {manifest.root}")
    print(manifest.root)
    return 0


def register(subparsers):
    parser = subparsers.add_parser('gen-data', help='Generate PNG trajectory datasets')
    parser.add_argument('--env', required=True, choices=sorted(ENVIRONMENTS))
    parser.add_argument('--n-traj', type=int, required=True)
    parser.add_argument('--seed', type=int, default=0)
    parser.add_argument('--out', required=True)
    parser.add_argument('--length', type=int, default=TRAJECTORY_LENGTH, help='Frames per trajectory')
    parser.add_argument('--workers', type=int, default=NUM_WORKERS)
    parser.set_defaults(handler=gen_data)
    return parser
