import csv
import json
import logging
import random
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, Subset
from tqdm import tqdm

from config import DETERMINISTIC, NUM_WORKERS, PAPER_SCALE_TRAINING, TRAINING_CONFIG
from models import ConfigError, ModelConfig, NumericalError, TrainingAbortedError, Triplet
from utils.dataset import TripletDataset
from utils.worldmodel import WorldModel, save_checkpoint

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ['epoch', 'step', 'total', 'recon_extractor', 'recon_interaction', 'wall_clock_s']


@dataclass
class LossBreakdown:
    total: torch.Tensor
    recon_extractor: torch.Tensor
    recon_interaction: torch.Tensor

    def as_floats(self):
        return {
            'total': float(self.total.detach()),
            'recon_extractor': float(self.recon_extractor.detach()),
            'recon_interaction': float(self.recon_interaction.detach()),
        }


def resolve_training_config(overrides=None, paper_scale=False):
    """Defaults, then the paper-scale profile if requested, then explicit overrides"""
    config = dict(TRAINING_CONFIG)
    if paper_scale:
        config.update(PAPER_SCALE_TRAINING)
    for key, value in (overrides or {}).items():
        if key not in TRAINING_CONFIG:
            raise ConfigError(f"Unknown training config key: {key}")
        config[key] = value
    if config['epochs'] < 1 or config['batch_size'] < 1:
        raise ConfigError("epochs and batch_size must be positive")
    return config


def seed_everything(seed, deterministic=DETERMINISTIC):
    """
    Seed python, numpy and torch RNGs

    Returns:
        bool: Whether deterministic kernels were requested
    """
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.benchmark = False
        torch.backends.cudnn.deterministic = True
    return deterministic


def _dump_nonfinite(batch, breakdown, dump_dir):
    """Write tensor statistics of a batch that produced a non-finite loss"""
    stats = {name: {
        'min': float(t.min()), 'max': float(t.max()),
        'finite': bool(torch.isfinite(t).all()),
    } for name, t in batch.items() if isinstance(t, torch.Tensor)}
    stats['loss'] = {k: str(v) for k, v in breakdown.as_floats().items()}
    if dump_dir is None:
        return stats
    dump_dir = Path(dump_dir)
    dump_dir.mkdir(parents=True, exist_ok=True)
    with open(dump_dir / 'nonfinite_dump.json', 'w') as f:
        json.dump(stats, f, indent=2)
    return stats


def as_batch(item):
    """Accept a Triplet or a dict of frames and return a batched dict of tensors"""
    if isinstance(item, Triplet):
        item = {'x_prev': item.x_prev, 'x_curr': item.x_curr, 'x_next': item.x_next}
    batch = {}
    for key in ('x_prev', 'x_curr', 'x_next'):
        value = torch.as_tensor(item[key])
        batch[key] = value.unsqueeze(0) if value.dim() == 3 else value
    return batch


def compute_loss(model, batch, dump_dir=None):
    """
    Joint loss of both prediction paths against x_{t+1}

    x' is the object-extractor path decode(ST(encode(x_t), motion(x_t, x_{t+1})))
    and x'' the interaction path fed with the transformed map 0. Each term is
    a per-pixel mean squared error in model scale.

    Args:
        model (WorldModel): Model in training mode
        batch (dict | Triplet): 'x_prev', 'x_curr', 'x_next' frames, (B, 3, H, W) or unbatched
        dump_dir (Path, optional): Where to write diagnostics on a non-finite loss

    Returns:
        LossBreakdown: total, recon_extractor, recon_interaction

    Raises:
        NumericalError: If any term is not finite
    """
    batch = as_batch(batch)
    x_extractor, x_interaction = model.joint_predict(batch['x_prev'], batch['x_curr'], batch['x_next'])
    recon_extractor = F.mse_loss(x_extractor, batch['x_next'])
    recon_interaction = F.mse_loss(x_interaction, batch['x_next'])
    breakdown = LossBreakdown(recon_extractor + recon_interaction, recon_extractor, recon_interaction)
    if not torch.isfinite(breakdown.total):
        stats = _dump_nonfinite(batch, breakdown, dump_dir)
        logger.error(f"Non-finite loss: {stats['loss']}")
        raise NumericalError(f"Non-finite loss {stats['loss']}")
    return breakdown


def training_step(model, optimizer, batch, grad_clip_norm=TRAINING_CONFIG['grad_clip_norm'], dump_dir=None):
    """One optimizer step; returns the pre-step loss breakdown as floats"""
    model.train()
    optimizer.zero_grad()
    breakdown = compute_loss(model, batch, dump_dir=dump_dir)
    breakdown.total.backward()
    if grad_clip_norm:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip_norm)
    optimizer.step()
    return breakdown.as_floats()


def make_optimizer(model, config):
    return torch.optim.Adam(model.parameters(), lr=config['learning_rate'], betas=tuple(config['betas']))


def triplet_subset(dataset, max_triplets, seed):
    if max_triplets is None or max_triplets >= len(dataset):
        return dataset
    order = np.random.default_rng(seed).permutation(len(dataset))[:max_triplets]
    return Subset(dataset, sorted(int(i) for i in order))


def _to_device(batch, device):
    return {k: v.to(device) for k, v in batch.items() if isinstance(v, torch.Tensor)}


@torch.no_grad()
def evaluate_loss(model, loader, device):
    """Mean loss components over a loader in inference mode"""
    model.eval()
    sums = {'total': 0.0, 'recon_extractor': 0.0, 'recon_interaction': 0.0}
    count = 0
    for batch in loader:
        batch = _to_device(batch, device)
        values = compute_loss(model, batch).as_floats()
        n = batch['x_curr'].shape[0]
        for key in sums:
            sums[key] += values[key] * n
        count += n
    return {key: value / max(count, 1) for key, value in sums.items()}


def train(manifest, config, out_dir, model_config=None, device='cpu', test_manifest=None):
    """
    Jointly optimise the object extractor and the interaction learner

    The data path is TripletDataset with with_actions=False, so action labels
    are never read. A checkpoint is written after every epoch; if a
    non-finite loss appears, training stops and the last good checkpoint stays.

    Args:
        manifest (DatasetManifest): Train split
        config (dict): Resolved training config (see resolve_training_config)
        out_dir (str | Path): Output directory for checkpoints and losses.csv
        model_config (ModelConfig, optional): Architecture, defaults to ModelConfig()
        device (str): Torch device
        test_manifest (DatasetManifest, optional): Held-out split for per-epoch loss

    Returns:
        dict: 'checkpoint' (final path), 'checkpoint_id', 'history' (per-epoch means)
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = config['seed']
    seed_everything(seed)

    dataset = triplet_subset(TripletDataset(manifest, with_actions=False), config['max_triplets'], seed)
    generator = torch.Generator().manual_seed(seed)
    loader = DataLoader(dataset, batch_size=config['batch_size'], shuffle=True, generator=generator,
                        num_workers=NUM_WORKERS, drop_last=False)
    test_loader = None
    if test_manifest is not None:
        test_set = triplet_subset(TripletDataset(test_manifest, with_actions=False),
                                  config['max_triplets'], seed)
        test_loader = DataLoader(test_set, batch_size=config['batch_size'], shuffle=False)

    model = WorldModel(model_config or ModelConfig()).to(device)
    optimizer = make_optimizer(model, config)
    logger.info(f"Training on {len(dataset)} triplets for {config['epochs']} epochs (device={device})")

    history = []
    last_checkpoint = None
    checkpoint_id = None
    step = 0
    started = time.time()
    with open(out_dir / 'losses.csv', 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=LOSS_COLUMNS)
        writer.writeheader()
        for epoch in range(1, config['epochs'] + 1):
            sums = {'total': 0.0, 'recon_extractor': 0.0, 'recon_interaction': 0.0}
            seen = 0
            for batch in tqdm(loader, desc=f'epoch {epoch}', leave=False):
                batch = _to_device(batch, device)
                try:
                    values = training_step(model, optimizer, batch, config['grad_clip_norm'], dump_dir=out_dir)
                except NumericalError as e:
                    logger.error(f"Aborting at epoch {epoch}, step {step}: {str(e)}")
                    raise TrainingAbortedError(str(e), last_checkpoint=last_checkpoint)
                n = batch['x_curr'].shape[0]
                for key in sums:
                    sums[key] += values[key] * n
                seen += n
                step += 1

            means = {key: value / max(seen, 1) for key, value in sums.items()}
            row = {'epoch': epoch, 'step': step, **means, 'wall_clock_s': round(time.time() - started, 3)}
            writer.writerow(row)
            f.flush()

            path = out_dir / f"ckpt_epoch_{epoch:03d}.pt"
            checkpoint_id = save_checkpoint(model, path, seed, epoch)
            last_checkpoint = path
            record = dict(row)
            if test_loader is not None:
                record['test'] = evaluate_loss(model, test_loader, device)
            history.append(record)
            logger.info(
                f"Epoch {epoch}: total={means['total']:.5f} extractor={means['recon_extractor']:.5f} "
                f"interaction={means['recon_interaction']:.5f}"
            )

    model.eval()
    return {'checkpoint': last_checkpoint, 'checkpoint_id': checkpoint_id, 'history': history, 'model': model}
