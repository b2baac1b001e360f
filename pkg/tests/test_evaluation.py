import csv
import json

import numpy as np
import pytest
import torch

import utils.dataset as dataset
from models import ActionTable, CEMConfig, ModelConfig, PlanResult, ShapeError
from utils import gridworld, pusher2d
from utils.actionmap import build_table, lookup, lookup_batch
from utils.environments import make_task
from utils.evaluation import (
    agent_map_centroids,
    agent_map_correlation,
    compare_reports,
    evaluate_model,
    mse_255,
    pos_err,
    rollout,
    summarize_episodes,
    viz_agent_map,
)
from utils.frames import to_model_scale, to_pixels
from utils.planner import LearnedForwardModel, locate_objects, locate_objects_batch, run_episode, run_random_episode
from utils.training import resolve_training_config, train
from utils.worldmodel import WorldModel, content_displacement_px

DISC_CENTERS = [(20.0, 20.0), (60.0, 20.0), (100.0, 20.0), (20.0, 80.0), (80.0, 90.0)]


@pytest.fixture(scope='module')
def small_model():
    torch.manual_seed(0)
    return WorldModel(ModelConfig(
        encoder_channels=[8, 8, 8, 8, 8, 8, 8],
        motion_channels=[8, 8, 8, 8, 8, 8, 8],
        motion_hidden=32,
        decoder_channels=[8, 8, 8, 8, 3],
        interaction_channels=[8, 8, 16, 16, 16],
    )).eval()


@pytest.fixture(scope='module')
def test_split(tmp_path_factory):
    """Ten short trajectories; the last one forms the test split"""
    root = tmp_path_factory.mktemp('evaldata')
    dataset.generate('gridworld', 10, seed=5, out_dir=root, length=6, workers=0)
    return dataset.load_manifest(root, split='test')


@pytest.fixture
def action_table():
    """Each entry carries its action id in the x translation slot"""
    entries = {a: [1.0, 0.0, float(a), 0.0, 1.0, 0.0] for a in range(4)}
    return ActionTable(entries=entries, counts={a: 1 for a in entries}, checkpoint_id='stub', per_action=1)


class PerfectModel(torch.nn.Module):
    """Looks up the true next frame of the test split from the current frame and action"""

    def __init__(self, manifest):
        super().__init__()
        self.transitions = {}
        for traj in range(manifest.trajectory_count):
            frames = dataset.read_trajectory_frames(manifest, traj)
            for t, action in enumerate(dataset._read_actions(dataset.trajectory_dir(manifest.root, traj))):
                self.transitions[(frames[t].tobytes(), action)] = frames[t + 1]

    def forward(self, x_prev, x_curr, phi_agent):
        out = []
        for frame, phi in zip(to_pixels(x_curr), phi_agent):
            action = int(round(float(phi[0, 2])))
            out.append(torch.from_numpy(to_model_scale(self.transitions[(frame.tobytes(), action)])))
        return torch.stack(out)


def test_mse_255_examples():
    """Test identical, off-by-one and black-vs-white frames"""
    black = np.zeros((128, 128, 3), dtype=np.uint8)
    assert mse_255(black, black) == 0.0
    assert mse_255(black + 1, black) == 1.0
    assert mse_255(black, black + 255) == 65025.0


def test_mse_255_shape_mismatch():
    """Test frames of different shapes raise ShapeError"""
    with pytest.raises(ShapeError):
        mse_255(np.zeros((128, 128, 3)), np.zeros((64, 64, 3)))


def test_pos_err_of_rendered_state():
    """Test a frame rendered from the true state scores within localization tolerance"""
    state = gridworld.make_state([(0, 1), (1, 3), (2, 0), (3, 2), (4, 4)])
    assert pos_err(gridworld.render(state), state) <= 1.5


def test_pos_err_one_shifted_object():
    """Test one of five discs shifted 5 px gives an error of 1.0"""
    truth = pusher2d.make_state(DISC_CENTERS)
    shifted = list(DISC_CENTERS)
    shifted[2] = (105.0, 20.0)
    assert pos_err(pusher2d.render(pusher2d.make_state(shifted)), truth) == pytest.approx(1.0, abs=1e-9)


def test_pos_err_black_frame():
    """Test every missing object counts 128 px"""
    truth = pusher2d.make_state(DISC_CENTERS)
    assert pos_err(np.zeros((128, 128, 3), dtype=np.uint8), truth) == 128.0


def test_evaluate_perfect_model(test_split, action_table, tmp_path):
    """Test a perfect predictor scores zero MSE and writes one CSV row per triplet"""
    report = evaluate_model(PerfectModel(test_split), action_table, test_split, out_dir=tmp_path)
    assert report['n'] == test_split.triplet_count
    assert report['mse_mean'] == 0.0
    assert report['pos_err_mean'] <= 1.5
    assert report['model_id'] == 'stub'
    assert report['dataset_id'] == test_split.dataset_id

    saved = json.loads((tmp_path / 'eval_report.json').read_text())
    assert set(saved) >= {'model_id', 'dataset_id', 'mse_mean', 'mse_std', 'pos_err_mean', 'pos_err_std', 'n'}
    with open(tmp_path / 'eval_triplets.csv') as f:
        assert len(list(csv.DictReader(f))) == test_split.triplet_count


def test_rollout_without_actions(small_model, action_table):
    """Test an empty action list generates nothing"""
    frame = gridworld.render(gridworld.make_state([(2, 2)]))
    assert rollout(small_model, action_table, frame, frame, []) == []


def test_rollout_ten_steps(small_model, tmp_path):
    """Test ten recursive steps give valid frames and a film strip"""
    identity = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]
    table = ActionTable(entries={a: identity for a in range(4)}, counts={}, checkpoint_id='', per_action=1)
    frame = gridworld.render(gridworld.make_state([(2, 2), (0, 0)]))
    frames = rollout(small_model, table, frame, frame, [1] * 10, strip_path=tmp_path / 'strip.png')
    assert len(frames) == 10
    assert all(f.shape == (128, 128, 3) and f.dtype == np.uint8 for f in frames)
    assert (tmp_path / 'strip.png').exists()


def test_viz_agent_map_layout(small_model):
    """Test each row shows the frame next to its map and repeated calls agree"""
    frames = [gridworld.render(gridworld.make_state([(r, 1), (4, 4)])) for r in range(3)]
    image = viz_agent_map(small_model, frames)
    assert image.shape == (3 * 128, 2 * 128, 3)
    assert np.array_equal(image[:128, :128], frames[0])
    assert np.array_equal(image, viz_agent_map(small_model, frames))


def test_agent_map_centroids_shape(small_model):
    """Test one in-image centroid per frame"""
    frames = [gridworld.render(gridworld.make_state([(r, r)])) for r in range(4)]
    centroids = agent_map_centroids(small_model, frames)
    assert centroids.shape == (4, 2)
    assert ((centroids >= 0) & (centroids <= 128)).all()


def test_summarize_episodes():
    """Test early-stopped episodes hold their final distance"""
    results = [
        PlanResult(actions=[1], distances=[1.0, 0.5], termination_reason='episode_length'),
        PlanResult(actions=[1, 2], distances=[1.0, 0.8, 0.2], termination_reason='episode_length'),
    ]
    summary = summarize_episodes(results)
    assert summary['n'] == 2
    assert summary['mean_curve'] == pytest.approx([1.0, 0.65, 0.35])
    assert summary['final_mean'] == pytest.approx(0.35)
    assert summary['final_std'] == pytest.approx(0.15)


def test_compare_reports():
    """Test the lower metric wins"""
    comparison = compare_reports({'mse_mean': 14.3, 'pos_err_mean': 0.48},
                                 {'mse_mean': 371.0, 'pos_err_mean': 0.3})
    assert comparison['mse_mean']['winner'] == 'stn'
    assert comparison['pos_err_mean']['winner'] == 'no_stn'


@pytest.fixture(scope='module')
def desk_run(tmp_path_factory):
    """Desk-scale gridworld pipeline: data, training and a four-demonstration table"""
    root = tmp_path_factory.mktemp('desk')
    manifest = dataset.generate('gridworld', 80, seed=0, out_dir=root / 'data', workers=0)
    result = train(manifest, resolve_training_config(), root / 'run')
    model = result['model'].eval()
    demos = dataset.sample_demonstrations(manifest, per_action=1, seed=0)
    table = build_table(demos, model, checkpoint_id=result['checkpoint_id'])
    return model, table, dataset.load_manifest(root / 'data', split='test')


@pytest.mark.slow
def test_desk_scale_one_step_prediction(desk_run):
    """Test one-step prediction quality with table transforms"""
    model, table, test_manifest = desk_run
    report = evaluate_model(model, table, test_manifest)
    assert report['pos_err_mean'] <= 2.0
    assert report['mse_mean'] <= 100.0


@pytest.mark.slow
def test_desk_scale_table_directions(desk_run):
    """Test each table entry moves map content in its action's direction"""
    model, table, _ = desk_run
    expected = {0: (-1, 0), 1: (1, 0), 2: (0, -1), 3: (0, 1)}
    for action, (sx, sy) in expected.items():
        dx, dy = content_displacement_px(lookup(table, action), model.config).tolist()
        dominant, minor = (dx, dy) if sx else (dy, dx)
        assert np.sign(dominant) == (sx or sy)
        assert abs(dominant) > abs(minor)


@pytest.mark.slow
def test_desk_scale_agent_map_tracks_agent(desk_run):
    """Test the agent-map centroid correlates with the true agent position"""
    model, _, test_manifest = desk_run
    correlation = agent_map_correlation(model, test_manifest, max_frames=200)
    assert correlation['n'] >= 200
    assert correlation['r_x'] >= 0.9 and correlation['r_y'] >= 0.9


# Expected image-space (dx, dy) of the agent per action id
IMAGE_DIRECTIONS = {0: (-1, 0), 1: (1, 0), 2: (0, -1), 3: (0, 1)}


@pytest.fixture(scope='module')
def ablation_run(desk_run, tmp_path_factory):
    """Same data and schedule with cross-convolution kernels in place of the STN"""
    _, _, test_manifest = desk_run
    root = tmp_path_factory.mktemp('ablation')
    manifest = dataset.load_manifest(test_manifest.root.parent, split='train')
    result = train(manifest, resolve_training_config(), root / 'run', model_config=ModelConfig(use_stn=False))
    model = result['model'].eval()
    demos = dataset.sample_demonstrations(manifest, per_action=1, seed=0)
    return model, build_table(demos, model, checkpoint_id=result['checkpoint_id'])


@torch.no_grad()
def agent_moves(model, table, manifest):
    """(action, predicted agent displacement or None, true displacement) for every test move of the agent"""
    moves = []
    for traj in range(manifest.trajectory_count):
        frames = dataset.read_trajectory_frames(manifest, traj)
        states = dataset.read_states(manifest, traj)
        actions = dataset._read_actions(dataset.trajectory_dir(manifest.root, traj))
        colors = gridworld.palette(states[0])
        picks = [t for t in range(1, len(actions)) if states[t + 1].positions[0] != states[t].positions[0]]
        if not picks:
            continue
        x_prev = torch.from_numpy(np.stack([to_model_scale(frames[t - 1]) for t in picks]))
        x_curr = torch.from_numpy(np.stack([to_model_scale(frames[t]) for t in picks]))
        predicted = to_pixels(model(x_prev, x_curr, lookup_batch(table, [actions[t] for t in picks])))
        before = locate_objects_batch(frames[picks], colors)[:, 0]
        after = locate_objects_batch(predicted, colors)[:, 0]
        for k, t in enumerate(picks):
            true_move = np.subtract(gridworld.object_centers_px(states[t + 1])[0],
                                    gridworld.object_centers_px(states[t])[0])
            move = None if np.isnan(after[k]).any() else after[k] - before[k]
            moves.append((actions[t], move, true_move))
    return moves


@pytest.mark.slow
def test_desk_scale_stn_beats_cross_convolution(desk_run, ablation_run):
    """Test the STN model predicts better than the cross-convolution ablation on both metrics"""
    model, table, test_manifest = desk_run
    ablation_model, ablation_table = ablation_run
    comparison = compare_reports(evaluate_model(model, table, test_manifest),
                                 evaluate_model(ablation_model, ablation_table, test_manifest))
    assert comparison['mse_mean']['winner'] == 'stn'
    assert comparison['pos_err_mean']['winner'] == 'stn'


@pytest.mark.slow
def test_desk_scale_mpc_beats_random(desk_run):
    """Test learned-model MPC over twenty seeded tasks against the random-action baseline"""
    model, table, _ = desk_run
    forward_model = LearnedForwardModel(model, table)
    cfg = CEMConfig()
    planned, random = [], []
    for task_seed in range(20):
        start, goal = make_task('gridworld', task_seed)
        planned.append(run_episode(gridworld, start, goal, forward_model, cfg))
        random.append(run_random_episode(gridworld, start, goal, cfg, seed=task_seed))
    planned_mean = summarize_episodes(planned)['final_mean']
    assert planned_mean <= 0.7
    assert planned_mean < summarize_episodes(random)['final_mean']


@pytest.mark.slow
def test_desk_scale_ten_step_rollouts_stay_sharp(desk_run):
    """Test every object stays within 8 px after ten recursive steps on most seeded rollouts"""
    model, table, _ = desk_run
    passed = 0
    for seed in range(50):
        traj = gridworld.sample_trajectory(10_000 + seed, 12)
        predicted = rollout(model, table, traj.frames[0], traj.frames[1], traj.actions[1:11])[-1]
        truth = traj.states[11]
        located = locate_objects(predicted, gridworld.palette(truth))
        centers = gridworld.object_centers_px(truth)
        if all(loc is not None and np.hypot(loc[0] - c[0], loc[1] - c[1]) <= 8.0
               for loc, c in zip(located, centers)):
            passed += 1
    assert passed >= 35


@pytest.mark.slow
def test_desk_scale_forward_sign_agreement(desk_run):
    """Test the predicted agent moves along its action's direction on at least 90% of test moves"""
    model, table, test_manifest = desk_run
    moves = agent_moves(model, table, test_manifest)
    assert moves
    agree = 0
    for action, move, _ in moves:
        if move is None:
            continue
        sx, sy = IMAGE_DIRECTIONS[action]
        dominant = move[0] if sx else move[1]
        agree += int(np.sign(dominant) == (sx or sy))
    assert agree >= 0.9 * len(moves)


@pytest.mark.slow
def test_desk_scale_table_round_trip(desk_run):
    """Test table transforms reproduce the true agent motion direction on at least 90% of test moves"""
    model, table, test_manifest = desk_run
    moves = agent_moves(model, table, test_manifest)
    aligned = sum(1 for _, move, true_move in moves
                  if move is not None and float(np.dot(move, true_move)) > 0.0)
    assert aligned >= 0.9 * len(moves)


@pytest.mark.slow
@torch.no_grad()
def test_desk_scale_static_pairs_encode_identity(desk_run):
    """Test a frame paired with itself encodes near-identity transforms for every map"""
    model, _, test_manifest = desk_run
    frames = np.stack([dataset.read_trajectory_frames(test_manifest, traj)[0]
                       for traj in range(test_manifest.trajectory_count)])
    x = torch.from_numpy(np.stack([to_model_scale(frame) for frame in frames]))
    motion = model.encode_motion(x, x)
    identity = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    assert (motion - identity).abs().max().item() < 0.05
