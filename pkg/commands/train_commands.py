import json
import logging

from config import DEVICE, TRAINING_CONFIG
from models import DataIntegrityError, ModelConfig
from utils.dataset import load_manifest
from utils.run_config import load_json_config, merge_config, resolve_device, resolve_path, write_run_record
from utils.training import resolve_training_config, train

logger = logging.getLogger(__name__)

CONFIG_KEYS = set(TRAINING_CONFIG) | {'model'}


def _test_split(data_dir):
    try:
        return load_manifest(data_dir, split='test')
    except DataIntegrityError:
        logger.info(f"No test split next to {data_dir}, skipping held-out loss")
        return None


def train_model(args):
    """
    Train the world model on the triplets of a dataset

    Arguments:
    --data: Dataset root (from gen-data) or a split directory
    --config: Optional JSON with training keys and a 'model' section
    --out: Output directory for checkpoints and losses.csv
    --paper-scale: Full-data, 50-epoch profile
    """
    data_dir = resolve_path(args.data, args.workdir)
    out_dir = resolve_path(args.out, args.workdir)
    file_config = load_json_config(resolve_path(args.config, args.workdir), CONFIG_KEYS)
    model_overrides = file_config.pop('model', {})
    if args.no_stn:
        model_overrides['use_stn'] = False
    model_config = ModelConfig.from_dict(model_overrides)

    overrides = merge_config({}, file_config, {
        'epochs': args.epochs,
        'batch_size': args.batch_size,
        'max_triplets': args.max_triplets,
        'seed': args.seed,
    })
    config = resolve_training_config(overrides, paper_scale=args.paper_scale)
    device = resolve_device(args.device)

    manifest = load_manifest(data_dir, split='train')
    test_manifest = _test_split(manifest.root.parent)
    result = train(manifest, config, out_dir, model_config=model_config, device=device,
                   test_manifest=test_manifest)
    # Recorded once train has applied the determinism settings
    write_run_record(out_dir, 'train', {**config, 'model': model_config.to_dict(),
                                        'paper_scale': args.paper_scale, 'data': data_dir},
                     device=device, seed=config['seed'])
    with open(out_dir / 'history.json', 'w') as f:
        json.dump(result['history'], f, indent=2)
    print(result['checkpoint'])
    return 0


def register(subparsers):
    parser = subparsers.add_parser('train', help='Train the world model without action labels')
    parser.add_argument('--data', required=True)
    parser.add_argument('--config', default=None, help='JSON training config')
    parser.add_argument('--out', required=True)
    parser.add_argument('--paper-scale', action='store_true')
    parser.add_argument('--epochs', type=int, default=None)
    parser.add_argument('--batch-size', type=int, default=None)
    parser.add_argument('--max-triplets', type=int, default=None)
    parser.add_argument('--seed', type=int, default=None)
    parser.add_argument('--no-stn', action='store_true', help='Cross-convolution ablation')
    parser.add_argument('--device', default=DEVICE)
    parser.set_defaults(handler=train_model)
    return parser
