import builtins
import json

import numpy as np
import pytest

import utils.dataset as dataset
from models import CoverageError, DataIntegrityError, DatasetManifest
from utils import gridworld


@pytest.fixture(scope='module')
def data_root(tmp_path_factory):
    """Ten 30-frame gridworld trajectories split 9/1"""
    root = tmp_path_factory.mktemp('gridworld')
    dataset.generate('gridworld', 10, seed=7, out_dir=root, length=30, workers=0)
    return root


@pytest.fixture
def train_manifest(data_root):
    return dataset.load_manifest(data_root, split='train')


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob('*')) if p.is_file()}


def test_generate_layout(data_root):
    """Test 10 trajectory directories with 30 PNG frames each"""
    traj_dirs = sorted(data_root.glob('*/traj_*'))
    assert len(traj_dirs) == 10
    for traj_dir in traj_dirs:
        assert len(list(traj_dir.glob('frame_*.png'))) == 30
        assert (traj_dir / 'frame_000.png').exists()
        assert len(json.loads((traj_dir / 'actions.json').read_text())) == 29


def test_manifest_contents(data_root, train_manifest):
    """Test manifest keys and split arithmetic"""
    data = json.loads((data_root / 'train' / 'manifest.json').read_text())
    assert set(data) == {'env_name', 'trajectory_count', 'frames_per_trajectory', 'split', 'seed',
                         'format_version'}
    assert train_manifest.trajectory_count == 9
    assert train_manifest.triplet_count == 9 * 28
    test_manifest = dataset.load_manifest(data_root, split='test')
    assert test_manifest.trajectory_count == 1


def test_paper_scale_split_arithmetic():
    """Test 700 trajectories of 32 frames give 18,900 training triplets"""
    manifest = DatasetManifest(env_name='gridworld', trajectory_count=700 - 700 // 10,
                               frames_per_trajectory=32, split='train', seed=0)
    assert manifest.triplet_count == 18900


def test_generate_is_deterministic(tmp_path):
    """Test the same seed writes byte-identical trees"""
    dataset.generate('gridworld', 2, seed=3, out_dir=tmp_path / 'a', length=5, workers=0)
    dataset.generate('gridworld', 2, seed=3, out_dir=tmp_path / 'b', length=5, workers=0)
    assert tree_bytes(tmp_path / 'a') == tree_bytes(tmp_path / 'b')


def test_frames_round_trip(train_manifest):
    """Test stored frames equal freshly rendered states bit-exactly"""
    frames = dataset.read_trajectory_frames(train_manifest, 0)
    states = dataset.read_states(train_manifest, 0)
    for frame, state in zip(frames, states):
        assert np.array_equal(frame, gridworld.render(state))


def test_load_triplets_without_actions(train_manifest):
    """Test triplet count, model scale and missing labels"""
    triplets = list(dataset.load_triplets(train_manifest, with_actions=False))
    assert len(triplets) == train_manifest.triplet_count
    for triplet in triplets[:20]:
        assert triplet.action_id is None
        assert triplet.x_curr.shape == (3, 128, 128)
        assert triplet.x_curr.min() >= -1.0 and triplet.x_curr.max() <= 1.0


def test_load_triplets_order_is_seeded(train_manifest):
    """Test re-iteration with the same shuffle seed gives the same order"""
    first = [t.x_curr.tobytes() for t in dataset.load_triplets(train_manifest, shuffle_seed=4)]
    second = [t.x_curr.tobytes() for t in dataset.load_triplets(train_manifest, shuffle_seed=4)]
    assert first == second


def test_single_trajectory_triplets(tmp_path):
    """Test one 30-frame trajectory yields 28 triplets"""
    manifest = dataset.generate('gridworld', 1, seed=1, out_dir=tmp_path, length=30, workers=0)
    assert len(list(dataset.load_triplets(manifest))) == 28


def test_load_triplets_with_actions(train_manifest):
    """Test labels match actions.json when requested"""
    labelled = dataset.TripletDataset(train_manifest, with_actions=True)
    actions = json.loads((dataset.trajectory_dir(train_manifest.root, 0) / 'actions.json').read_text())
    for i in range(5):
        traj, t = labelled.locate(i)
        assert labelled[i]['action'] == actions[t]


def test_unsupervised_path_never_reads_actions(train_manifest, monkeypatch):
    """Test action labels stay quarantined from the unsupervised loader"""
    opened = []
    real_open = builtins.open

    def tracking_open(file, *args, **kwargs):
        opened.append(str(file))
        return real_open(file, *args, **kwargs)

    def forbidden(traj_dir):
        raise AssertionError(f"action labels read from {traj_dir}")

    monkeypatch.setattr(builtins, 'open', tracking_open)
    monkeypatch.setattr(dataset, '_read_actions', forbidden)
    for _ in dataset.load_triplets(train_manifest, with_actions=False):
        pass
    unlabelled = dataset.TripletDataset(train_manifest, with_actions=False)
    assert 'action' not in unlabelled[0]
    assert not any(path.endswith('actions.json') for path in opened)


def test_corrupt_frame_names_file(tmp_path):
    """Test a corrupt PNG raises DataIntegrityError naming the file"""
    manifest = dataset.generate('gridworld', 1, seed=2, out_dir=tmp_path, length=5, workers=0)
    broken = dataset.frame_path(dataset.trajectory_dir(manifest.root, 0), 2)
    broken.write_bytes(b'not a png')
    with pytest.raises(DataIntegrityError) as excinfo:
        list(dataset.load_triplets(manifest))
    assert excinfo.value.path == broken
    assert 'frame_002.png' in str(excinfo.value)


def test_missing_manifest(tmp_path):
    """Test loading from an empty directory raises DataIntegrityError"""
    with pytest.raises(DataIntegrityError):
        dataset.load_manifest(tmp_path)


def test_sample_demonstrations_one_per_action(train_manifest):
    """Test one demonstration per action, each an actual move"""
    demos = dataset.sample_demonstrations(train_manifest, per_action=1, seed=0)
    assert sorted(action for _, _, action in demos) == [0, 1, 2, 3]
    for x_t, x_next, _ in demos:
        assert x_t.shape == (3, 128, 128)
        assert not np.array_equal(x_t, x_next)


def test_sample_demonstrations_is_seeded(train_manifest):
    """Test the same seed picks the same demonstrations"""
    a = dataset.sample_demonstrations(train_manifest, per_action=2, seed=5)
    b = dataset.sample_demonstrations(train_manifest, per_action=2, seed=5)
    assert [d[2] for d in a] == [d[2] for d in b]
    assert all(np.array_equal(x[0], y[0]) and np.array_equal(x[1], y[1]) for x, y in zip(a, b))


def test_sample_demonstrations_coverage(train_manifest, monkeypatch):
    """Test a split without any 'down' action raises CoverageError"""
    real_read = dataset._read_actions
    monkeypatch.setattr(dataset, '_read_actions', lambda d: [a if a != 3 else 0 for a in real_read(d)])
    with pytest.raises(CoverageError):
        dataset.sample_demonstrations(train_manifest, per_action=1, seed=0)


def test_unknown_environment(tmp_path):
    """Test generating for an unknown environment raises"""
    with pytest.raises(ValueError):
        dataset.generate('atari', 1, seed=0, out_dir=tmp_path, workers=0)
