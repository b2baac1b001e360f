import json
import logging

from tqdm import tqdm

from config import CEM_CONFIG, DEVICE
from models import CEMConfig, ConfigError
from utils.actionmap import load_table
from utils.environments import ENVIRONMENTS, get_environment, make_task
from utils.evaluation import summarize_episodes
from utils.planner import LearnedForwardModel, OracleForwardModel, run_episode, run_random_episode, save_plan_result
from utils.run_config import load_json_config, merge_config, resolve_device, resolve_path, write_run_record
from utils.worldmodel import load_checkpoint

logger = logging.getLogger(__name__)


def _forward_model(args, env, device):
    if args.oracle:
        return OracleForwardModel(env)
    if not args.ckpt or not args.table:
        raise ConfigError("plan needs --ckpt and --table unless --oracle is given")
    model, _ = load_checkpoint(resolve_path(args.ckpt, args.workdir), device)
    return LearnedForwardModel(model, load_table(resolve_path(args.table, args.workdir)), device)


def plan(args):
    """
    Solve pushing tasks with CEM model-predictive control

    Arguments:
    --ckpt, --table: Trained artifacts (not needed with --oracle)
    --env: Environment name
    --task-seed: Seed of the first task
    --cfg: Optional JSON CEM config
    --out: Output directory, one task_NNN subdirectory per task
    """
    file_config = load_json_config(resolve_path(args.cfg, args.workdir), set(CEM_CONFIG) | {'n_actions'})
    cfg = CEMConfig.from_dict(merge_config(CEM_CONFIG, file_config, {
        'episode_length': args.episode_length,
        'seed': args.seed,
    }))
    device = resolve_device(args.device)
    env = get_environment(args.env)
    forward_model = _forward_model(args, env, device)
    out_dir = resolve_path(args.out, args.workdir)
    out_dir.mkdir(parents=True, exist_ok=True)

    results, baselines = [], []
    for k in tqdm(range(args.n_tasks), desc='tasks'):
        task_seed = args.task_seed + k
        start, goal = make_task(args.env, task_seed, min_pushes=args.min_pushes, n_objects=args.n_objects)
        task_dir = out_dir / f"task_{task_seed:04d}"
        result = run_episode(env, start, goal, forward_model, cfg)
        save_plan_result(result, task_dir, goal=env.render(goal))
        results.append(result)
        if args.baseline:
            baseline = run_random_episode(env, start, goal, cfg, seed=task_seed)
            save_plan_result(baseline, task_dir / 'random')
            baselines.append(baseline)
        logger.info(f"Task {task_seed}: final distance {result.final_distance:.3f} ({result.termination_reason})")

    summary = {'planner': summarize_episodes(results)}
    if baselines:
        summary['random'] = summarize_episodes(baselines)
    summary['final_distances'] = [r.final_distance for r in results]
    with open(out_dir / 'summary.json', 'w') as f:
        json.dump(summary, f, indent=2)
    write_run_record(out_dir, 'plan', {
        'cem': cfg.to_dict(), 'env': args.env, 'task_seed': args.task_seed, 'n_tasks': args.n_tasks,
        'min_pushes': args.min_pushes, 'n_objects': args.n_objects, 'oracle': args.oracle,
        'baseline': args.baseline, 'ckpt': args.ckpt, 'table': args.table,
    }, device=device, seed=cfg.seed)
    report = {'final_distances': summary['final_distances'], 'final_mean': summary['planner']['final_mean']}
    if baselines:
        report['random_final_mean'] = summary['random']['final_mean']
    print(json.dumps(report, indent=2))
    return 0


def register(subparsers):
    parser = subparsers.add_parser('plan', help='Model-predictive control with CEM')
    parser.add_argument('--ckpt', default=None)
    parser.add_argument('--table', default=None)
    parser.add_argument('--env', required=True, choices=sorted(ENVIRONMENTS))
    parser.add_argument('--task-seed', type=int, required=True)
    parser.add_argument('--cfg', default=None, help='JSON CEM config')
    parser.add_argument('--out', required=True)
    parser.add_argument('--n-tasks', type=int, default=1)
    parser.add_argument('--min-pushes', type=int, default=3)
    parser.add_argument('--n-objects', type=int, default=None, help='Objects including the agent')
    parser.add_argument('--episode-length', type=int, default=None)
    parser.add_argument('--seed', type=int, default=None, help='CEM sampling seed')
    parser.add_argument('--oracle', action='store_true', help='Plan with the true environment')
    parser.add_argument('--baseline', action='store_true', help='Also run a random-action baseline')
    parser.add_argument('--device', default=DEVICE)
    parser.set_defaults(handler=plan)
    return parser
