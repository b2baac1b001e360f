import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import Dataset
from tqdm import tqdm

from config import ACTIONS, DATASET_CONFIG, NUM_WORKERS, TRAJECTORY_LENGTH
from models import CoverageError, DataIntegrityError, DatasetManifest, Triplet
from utils.environments import get_environment, state_from_dict
from utils.frames import read_png, to_model_scale, write_png

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'
ACTIONS_NAME = 'actions.json'
STATES_NAME = 'states.json'
SPLITS = ('train', 'test')


def trajectory_dir(root, index):
    return Path(root) / f"traj_{index:04d}"


def frame_path(traj_dir, t):
    return Path(traj_dir) / f"frame_{t:03d}.png"


def trajectory_seeds(seed, n_traj):
    """Independent per-trajectory seeds derived from one dataset seed"""
    children = np.random.SeedSequence(seed).spawn(n_traj)
    return [int(child.generate_state(1)[0]) for child in children]


def _write_trajectory(job):
    env_name, traj_seed, length, traj_dir = job
    env = get_environment(env_name)
    trajectory = env.sample_trajectory(traj_seed, length)
    traj_dir = Path(traj_dir)
    traj_dir.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(trajectory.frames):
        write_png(frame, frame_path(traj_dir, t))
    with open(traj_dir / ACTIONS_NAME, 'w') as f:
        json.dump(trajectory.actions, f)
    with open(traj_dir / STATES_NAME, 'w') as f:
        json.dump([s.to_dict() for s in trajectory.states], f)
    return str(traj_dir)


def write_manifest(manifest, root):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / MANIFEST_NAME, 'w') as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)
    manifest.root = root
    return manifest


def generate(env, n_traj, seed, out_dir, length=TRAJECTORY_LENGTH, workers=NUM_WORKERS):
    """
    Generate a trajectory dataset as PNG sequences with JSON side files

    Trajectories are split at trajectory level: one in every
    DATASET_CONFIG['test_every'] goes to out_dir/test, the rest to out_dir/train.
    Each split directory holds its own manifest.json.

    Args:
        env (str): 'gridworld' or 'pusher2d'
        n_traj (int): Total number of trajectories
        seed (int): Dataset seed, every trajectory seed derives from it
        out_dir (str | Path): Output root
        length (int): Frames per trajectory
        workers (int): Worker processes, 0 generates in-process

    Returns:
        DatasetManifest: Manifest of the train split
    """
    get_environment(env)
    out_dir = Path(out_dir)
    n_test = n_traj // DATASET_CONFIG['test_every']
    n_train = n_traj - n_test
    seeds = trajectory_seeds(seed, n_traj)

    jobs = []
    for index, traj_seed in enumerate(seeds):
        split, local = ('train', index) if index < n_train else ('test', index - n_train)
        jobs.append((env, traj_seed, length, str(trajectory_dir(out_dir / split, local))))

    logger.info(f"Generating {n_traj} {env} trajectories ({n_train} train / {n_test} test) into {out_dir}")
    if workers and workers > 0:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(tqdm(pool.map(_write_trajectory, jobs), total=len(jobs), desc='gen-data'))
    else:
        for job in tqdm(jobs, desc='gen-data'):
            _write_trajectory(job)

    manifests = {}
    for split, count in (('train', n_train), ('test', n_test)):
        if count == 0:
            continue
        manifest = DatasetManifest(
            env_name=env,
            trajectory_count=count,
            frames_per_trajectory=length,
            split=split,
            seed=seed,
        )
        manifests[split] = write_manifest(manifest, out_dir / split)
    return manifests['train']


def load_manifest(path, split=None):
    """
    Load a manifest from a split directory, a manifest file, or a dataset root plus split

    Args:
        path (str | Path): Split directory, manifest.json path, or generate() out_dir
        split (str, optional): Split to pick when path is a dataset root

    Returns:
        DatasetManifest: Manifest with root set to the split directory
    """
    path = Path(path)
    if path.is_file():
        path = path.parent
    elif not (path / MANIFEST_NAME).exists() and split is not None:
        path = path / split
    manifest_file = path / MANIFEST_NAME
    try:
        with open(manifest_file) as f:
            data = json.load(f)
    except FileNotFoundError:
        raise DataIntegrityError(manifest_file, "manifest is missing")
    except json.JSONDecodeError as e:
        raise DataIntegrityError(manifest_file, f"manifest is not valid JSON ({str(e)})")
    manifest = DatasetManifest.from_dict(data, root=path)
    if split is not None and manifest.split != split:
        raise DataIntegrityError(manifest_file, f"expected split '{split}', found '{manifest.split}'")
    return manifest


def _read_actions(traj_dir):
    """Only access point to action labels on disk"""
    path = Path(traj_dir) / ACTIONS_NAME
    try:
        with open(path) as f:
            actions = json.load(f)
    except FileNotFoundError:
        raise DataIntegrityError(path, "action labels are missing")
    except json.JSONDecodeError as e:
        raise DataIntegrityError(path, f"action labels are not valid JSON ({str(e)})")
    return [int(a) for a in actions]


def read_states(manifest, traj_index):
    """Ground-truth states of one trajectory, for evaluation only"""
    path = trajectory_dir(manifest.root, traj_index) / STATES_NAME
    try:
        with open(path) as f:
            records = json.load(f)
    except FileNotFoundError:
        raise DataIntegrityError(path, "ground-truth states are missing")
    return [state_from_dict(manifest.env_name, record) for record in records]


def read_trajectory_frames(manifest, traj_index):
    traj_dir = trajectory_dir(manifest.root, traj_index)
    return np.stack([read_png(frame_path(traj_dir, t)) for t in range(manifest.frames_per_trajectory)])


class TripletDataset(Dataset):
    """
    Triplets {x_{t-1}, x_t, x_{t+1}} of a manifest as model-scale tensors

    Frames are decoded once per trajectory and cached as uint8. Action labels
    are attached only when with_actions is set.
    """

    def __init__(self, manifest, with_actions=False):
        self.manifest = manifest
        self.with_actions = with_actions
        per_traj = manifest.frames_per_trajectory - 2
        self.index = [(traj, t) for traj in range(manifest.trajectory_count) for t in range(1, per_traj + 1)]
        self._frames = {}
        self._actions = {}

    def __len__(self):
        return len(self.index)

    def frames(self, traj):
        if traj not in self._frames:
            self._frames[traj] = read_trajectory_frames(self.manifest, traj)
        return self._frames[traj]

    def actions(self, traj):
        if traj not in self._actions:
            self._actions[traj] = _read_actions(trajectory_dir(self.manifest.root, traj))
        return self._actions[traj]

    def locate(self, i):
        return self.index[i]

    def __getitem__(self, i):
        traj, t = self.index[i]
        frames = self.frames(traj)
        item = {
            'x_prev': torch.from_numpy(to_model_scale(frames[t - 1])),
            'x_curr': torch.from_numpy(to_model_scale(frames[t])),
            'x_next': torch.from_numpy(to_model_scale(frames[t + 1])),
        }
        if self.with_actions:
            item['action'] = self.actions(traj)[t]
        return item


def load_triplets(manifest, with_actions=False, shuffle_seed=DATASET_CONFIG['shuffle_seed']):
    """
    Iterate over all triplets of a split in a seeded shuffled order

    Args:
        manifest (DatasetManifest): Split manifest with root set
        with_actions (bool): Attach the action a_t that produced x_{t+1}
        shuffle_seed (int): Seed of the visiting order

    Yields:
        Triplet: model-scale frames, action_id None unless with_actions
    """
    dataset = TripletDataset(manifest, with_actions=with_actions)
    order = np.random.default_rng(shuffle_seed).permutation(len(dataset))
    for i in order:
        item = dataset[int(i)]
        yield Triplet(
            x_prev=item['x_prev'].numpy(),
            x_curr=item['x_curr'].numpy(),
            x_next=item['x_next'].numpy(),
            action_id=item.get('action'),
        )


def sample_demonstrations(manifest, per_action, seed, unobstructed_only=True):
    """
    Draw labelled transitions for building the action-transformation table

    Candidates are all (x_t, x_{t+1}) pairs of the split; with unobstructed_only
    the pairs whose frames are identical (blocked moves) are skipped.

    Args:
        manifest (DatasetManifest): Split manifest
        per_action (int): Demonstrations per action id
        seed (int): Sampling seed
        unobstructed_only (bool): Skip transitions that left the frame unchanged

    Returns:
        list: (x_curr, x_next, action_id) with model-scale frames

    Raises:
        CoverageError: If an action has fewer than per_action candidates
    """
    candidates = {action: [] for action in ACTIONS}
    for traj in range(manifest.trajectory_count):
        for t, action in enumerate(_read_actions(trajectory_dir(manifest.root, traj))):
            candidates[action].append((traj, t))

    rng = np.random.default_rng(seed)
    frames_cache = {}
    demos = []
    for action in sorted(candidates):
        pool = candidates[action]
        accepted = 0
        for k in rng.permutation(len(pool)):
            if accepted == per_action:
                break
            traj, t = pool[int(k)]
            if traj not in frames_cache:
                frames_cache[traj] = read_trajectory_frames(manifest, traj)
            frames = frames_cache[traj]
            if unobstructed_only and np.array_equal(frames[t], frames[t + 1]):
                continue
            demos.append((to_model_scale(frames[t]), to_model_scale(frames[t + 1]), action))
            accepted += 1
        if accepted < per_action:
            raise CoverageError(
                f"Action {action} ({ACTIONS[action]}) has {accepted} usable transitions, need {per_action}"
            )
    logger.info(f"Sampled {len(demos)} demonstrations ({per_action} per action) from {manifest.dataset_id}")
    return demos
