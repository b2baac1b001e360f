import csv
import json
import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from config import IMAGE_SIZE, MISSING_OBJECT_PENALTY_PX
from models import ShapeError
from utils.actionmap import lookup, lookup_batch
from utils.dataset import TripletDataset, read_states, read_trajectory_frames
from utils.environments import env_name_of, get_environment
from utils.frames import film_strip, to_model_scale, to_pixels, write_png
from utils.planner import locate_objects_batch

logger = logging.getLogger(__name__)

EVAL_COLUMNS = ['trajectory', 't', 'action', 'mse_255', 'pos_err']


def mse_255(pred, truth):
    """
    Mean squared pixel error on the 0-255 scale

    Args:
        pred (np.ndarray): (H, W, 3) frame
        truth (np.ndarray): Frame of the same shape

    Returns:
        float: Mean over pixels and channels

    Raises:
        ShapeError: If the shapes differ
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"Cannot compare frames of shape {pred.shape} and {truth.shape}")
    return float(np.mean((pred - truth) ** 2))


def pos_err(pred, truth_state, env=None):
    """
    Mean over all objects, the agent included, of the pixel distance between
    the located center in pred and the true center. A missing object counts
    as MISSING_OBJECT_PENALTY_PX.
    """
    env = env or get_environment(env_name_of(truth_state))
    located = locate_objects_batch(np.asarray(pred)[None], env.palette(truth_state))[0]
    truth = np.asarray(env.object_centers_px(truth_state), dtype=np.float64)
    distances = np.linalg.norm(located - truth, axis=-1)
    distances = np.where(np.isnan(distances), MISSING_OBJECT_PENALTY_PX, distances)
    return float(distances.mean())


def _summary(values):
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return {'mean': float('nan'), 'std': float('nan'), 'median': float('nan')}
    return {'mean': float(values.mean()), 'std': float(values.std()), 'median': float(np.median(values))}


@torch.no_grad()
def evaluate_model(model, table, test_manifest, out_dir=None, model_id=None, device='cpu', batch_size=32):
    """
    One-step conditional prediction over every test triplet

    The agent transform comes from lookup(table, a_t); the action label is
    never fed to the model directly.

    Args:
        model (WorldModel): Trained model
        table (ActionTable): Action-transformation table
        test_manifest (DatasetManifest): Test split manifest
        out_dir (str | Path, optional): Where to write eval_report.json and eval_triplets.csv
        model_id (str, optional): Defaults to the table's checkpoint id
        device (str): Torch device
        batch_size (int): Triplets per forward pass

    Returns:
        dict: Report with mse/pos_err mean, std and median plus n
    """
    model.eval()
    env = get_environment(test_manifest.env_name)
    dataset = TripletDataset(test_manifest, with_actions=True)
    states = {}
    rows = []
    for start in tqdm(range(0, len(dataset), batch_size), desc='eval', leave=False):
        indices = range(start, min(start + batch_size, len(dataset)))
        items = [dataset[i] for i in indices]
        x_prev = torch.stack([item['x_prev'] for item in items]).to(device)
        x_curr = torch.stack([item['x_curr'] for item in items]).to(device)
        actions = [int(item['action']) for item in items]
        phi = lookup_batch(table, actions).to(device)
        predicted = to_pixels(model(x_prev, x_curr, phi))
        for i, frame, action in zip(indices, predicted, actions):
            traj, t = dataset.locate(i)
            if traj not in states:
                states[traj] = read_states(test_manifest, traj)
            truth_frame = dataset.frames(traj)[t + 1]
            rows.append({
                'trajectory': traj,
                't': t,
                'action': action,
                'mse_255': mse_255(frame, truth_frame),
                'pos_err': pos_err(frame, states[traj][t + 1], env),
            })

    mse = _summary([row['mse_255'] for row in rows])
    err = _summary([row['pos_err'] for row in rows])
    report = {
        'model_id': model_id or table.checkpoint_id,
        'dataset_id': test_manifest.dataset_id,
        'mse_mean': mse['mean'],
        'mse_std': mse['std'],
        'mse_median': mse['median'],
        'pos_err_mean': err['mean'],
        'pos_err_std': err['std'],
        'pos_err_median': err['median'],
        'n': len(rows),
    }
    logger.info(f"Evaluated {report['n']} triplets: MSE {report['mse_mean']:.2f} ± {report['mse_std']:.2f}, "
                f"pos err {report['pos_err_mean']:.3f} ± {report['pos_err_std']:.3f}")

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / 'eval_report.json', 'w') as f:
            json.dump(report, f, indent=2)
        with open(out_dir / 'eval_triplets.csv', 'w', newline='') as f:
            writer = csv.DictWriter(f, fieldnames=EVAL_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
    return report


@torch.no_grad()
def rollout(model, table, x0, x1, actions, device='cpu', strip_path=None):
    """
    Closed-loop generation: each prediction becomes the next input

    Args:
        model (WorldModel): Trained model
        table (ActionTable): Action-transformation table
        x0 (np.ndarray): First (H, W, 3) uint8 frame
        x1 (np.ndarray): Second frame
        actions (list): Action ids, one per generated frame
        device (str): Torch device
        strip_path (str | Path, optional): Write x0, x1 and the predictions as one film strip

    Returns:
        list: Generated (H, W, 3) uint8 frames, one per action
    """
    model.eval()
    x_prev = torch.from_numpy(to_model_scale(x0)).to(device)
    x_curr = torch.from_numpy(to_model_scale(x1)).to(device)
    frames = []
    for action in actions:
        x_next = model(x_prev, x_curr, lookup(table, action).to(device))
        frames.append(to_pixels(x_next))
        x_prev, x_curr = x_curr, x_next
    if strip_path is not None:
        write_png(film_strip([np.asarray(x0), np.asarray(x1)] + frames), strip_path)
    return frames


@torch.no_grad()
def agent_maps(model, frames, device='cpu'):
    """|encode_image(x)[0]| for a batch of uint8 frames, as (N, map_size, map_size)"""
    model.eval()
    x = torch.stack([torch.from_numpy(to_model_scale(f)) for f in frames]).to(device)
    return model.encode_image(x)[:, 0].abs().cpu()


def viz_agent_map(model, frames, device='cpu'):
    """
    Each input frame next to its normalized absolute agent map, one row per frame

    Returns:
        np.ndarray: (N * 128, 256, 3) uint8 image
    """
    maps = agent_maps(model, frames, device)
    upsampled = F.interpolate(maps.unsqueeze(1), size=(IMAGE_SIZE, IMAGE_SIZE), mode='nearest')[:, 0]
    peak = upsampled.flatten(1).max(dim=1).values.clamp_min(1e-12)
    gray = (upsampled / peak[:, None, None] * 255.0).round().to(torch.uint8).numpy()
    rows = [np.concatenate([np.asarray(frame), np.repeat(g[..., None], 3, axis=-1)], axis=1)
            for frame, g in zip(frames, gray)]
    return np.concatenate(rows, axis=0)


def agent_map_centroids(model, frames, device='cpu'):
    """Weighted centroid of |agent map| per frame, in image pixel coordinates"""
    maps = agent_maps(model, frames, device).double()
    n, h, w = maps.shape
    scale = IMAGE_SIZE / w
    xs = (torch.arange(w, dtype=torch.float64) + 0.5) * scale
    ys = (torch.arange(h, dtype=torch.float64) + 0.5) * scale
    total = maps.sum(dim=(1, 2)).clamp_min(1e-12)
    cx = (maps.sum(dim=1) * xs).sum(dim=1) / total
    cy = (maps.sum(dim=2) * ys).sum(dim=1) / total
    return torch.stack([cx, cy], dim=1).numpy()


def agent_map_correlation(model, manifest, max_frames=200, device='cpu'):
    """
    Pearson correlation between agent-map centroids and true agent positions

    Returns:
        dict: 'r_x', 'r_y' and 'n' frames used
    """
    env = get_environment(manifest.env_name)
    frames, truth = [], []
    for traj in range(manifest.trajectory_count):
        states = read_states(manifest, traj)
        for frame, state in zip(read_trajectory_frames(manifest, traj), states):
            frames.append(frame)
            truth.append(env.object_centers_px(state)[0])
        if len(frames) >= max_frames:
            break
    frames, truth = frames[:max_frames], np.asarray(truth[:max_frames], dtype=np.float64)
    centroids = agent_map_centroids(model, frames, device)
    r_x = float(np.corrcoef(centroids[:, 0], truth[:, 0])[0, 1])
    r_y = float(np.corrcoef(centroids[:, 1], truth[:, 1])[0, 1])
    logger.info(f"Agent map correlation over {len(frames)} frames: r_x={r_x:.3f} r_y={r_y:.3f}")
    return {'r_x': r_x, 'r_y': r_y, 'n': len(frames)}


def summarize_episodes(results):
    """
    Aggregate normalized distances of several episodes

    Episodes that stopped early hold their last distance for the remaining steps.

    Args:
        results (list): PlanResult per task

    Returns:
        dict: per-step mean/std curves and final-step mean/std
    """
    if not results:
        return {'n': 0, 'final_mean': float('nan'), 'final_std': float('nan'), 'mean_curve': [], 'std_curve': []}
    length = max(len(r.distances) for r in results)
    curves = np.array([r.distances + [r.distances[-1]] * (length - len(r.distances)) for r in results])
    finals = np.array([r.final_distance for r in results])
    return {
        'n': len(results),
        'final_mean': float(finals.mean()),
        'final_std': float(finals.std()),
        'mean_curve': curves.mean(axis=0).tolist(),
        'std_curve': curves.std(axis=0).tolist(),
        'termination_reasons': [r.termination_reason for r in results],
    }


def compare_reports(stn_report, no_stn_report, metrics=('mse_mean', 'pos_err_mean')):
    """Side-by-side metrics of the STN model and the cross-convolution ablation; lower wins"""
    comparison = {}
    for metric in metrics:
        stn, ablation = stn_report[metric], no_stn_report[metric]
        comparison[metric] = {
            'stn': stn,
            'no_stn': ablation,
            'winner': 'stn' if stn < ablation else ('no_stn' if ablation < stn else 'tie'),
        }
    return comparison
