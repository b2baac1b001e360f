import json

import numpy as np
import pytest
import torch

from models import ActionTable, CoverageError, DataIntegrityError, ModelConfig, UnknownActionError
from utils.actionmap import build_table, load_table, lookup, lookup_batch, nearest_action, save_table
from utils.worldmodel import WorldModel, identity_theta, translation_theta


@pytest.fixture(scope='module')
def model():
    torch.manual_seed(0)
    config = ModelConfig(
        encoder_channels=[8, 8, 8, 8, 8, 8, 8],
        motion_channels=[8, 8, 8, 8, 8, 8, 8],
        motion_hidden=32,
        decoder_channels=[8, 8, 8, 8, 3],
        interaction_channels=[8, 8, 16, 16, 16],
    )
    return WorldModel(config).eval()


@pytest.fixture
def demos():
    """One random frame pair per action"""
    rng = np.random.default_rng(0)
    pairs = []
    for action in range(4):
        x_t = rng.uniform(-1, 1, size=(3, 128, 128)).astype(np.float32)
        x_next = rng.uniform(-1, 1, size=(3, 128, 128)).astype(np.float32)
        pairs.append((x_t, x_next, action))
    return pairs


@pytest.fixture
def table():
    """Hand-written translations, one per action"""
    entries = {
        0: translation_theta(torch.tensor([0.125, 0.0])).flatten().tolist(),
        1: translation_theta(torch.tensor([-0.125, 0.0])).flatten().tolist(),
        2: translation_theta(torch.tensor([0.0, 0.125])).flatten().tolist(),
        3: translation_theta(torch.tensor([0.0, -0.125])).flatten().tolist(),
    }
    return ActionTable(entries=entries, counts={a: 1 for a in entries}, checkpoint_id='abc123', per_action=1)


def test_build_table_one_entry_per_action(model, demos):
    """Test four demonstrations give four entries, identity for an untrained encoder"""
    table = build_table(demos, model, checkpoint_id='ckpt')
    assert len(table) == 4
    assert table.checkpoint_id == 'ckpt'
    assert table.per_action == 1
    for action in range(4):
        torch.testing.assert_close(lookup(table, action), identity_theta())


def test_build_table_mean_is_idempotent(model, demos):
    """Test a duplicated demonstration yields the same entry as a single one"""
    once = build_table(demos, model)
    twice = build_table(demos + [demos[1]], model)
    assert twice.counts[1] == 2
    np.testing.assert_allclose(twice.entries[1], once.entries[1], atol=1e-7)


def test_build_table_is_deterministic(model, demos):
    """Test identical demonstrations and checkpoint give identical tables"""
    assert build_table(demos, model).entries == build_table(demos, model).entries


def test_build_table_requires_coverage(model, demos):
    """Test a missing action raises CoverageError"""
    with pytest.raises(CoverageError):
        build_table(demos[:3], model)


def test_lookup_returns_stored_transform(table):
    """Test the stored matrix comes back unchanged"""
    torch.testing.assert_close(lookup(table, 1), translation_theta(torch.tensor([-0.125, 0.0])))
    assert lookup_batch(table, [0, 1, 1]).shape == (3, 2, 3)
    assert len(table) == 4


def test_lookup_unknown_action(table):
    """Test unknown ids raise a KeyError subclass"""
    with pytest.raises(UnknownActionError):
        lookup(table, 7)
    with pytest.raises(KeyError):
        lookup(table, 'jump')


def test_nearest_action(table):
    """Test a motion close to the 'right' entry maps back to it"""
    motion = translation_theta(torch.tensor([-0.11, 0.01]))
    assert nearest_action(table, motion) == 1


def test_save_load_round_trip(table, tmp_path):
    """Test the JSON layout and a lossless reload"""
    path = save_table(table, tmp_path / 'table.json')
    data = json.loads(path.read_text())
    assert set(data) == {'0', '1', '2', '3', 'checkpoint_id', 'per_action'}
    assert len(data['0']) == 6

    loaded = load_table(path)
    assert loaded.entries == table.entries
    assert loaded.checkpoint_id == 'abc123'
    assert loaded.use_stn


def test_load_missing_table(tmp_path):
    """Test a missing file raises DataIntegrityError"""
    with pytest.raises(DataIntegrityError):
        load_table(tmp_path / 'absent.json')


def test_cross_convolution_table():
    """Test kernel entries from the ablation come back as 9x9 kernels"""
    torch.manual_seed(1)
    net = WorldModel(ModelConfig(
        use_stn=False,
        encoder_channels=[8, 8, 8, 8, 8, 8, 8],
        motion_channels=[8, 8, 8, 8, 8, 8, 8],
        motion_hidden=32,
        decoder_channels=[8, 8, 8, 8, 3],
        interaction_channels=[8, 8, 16, 16, 16],
    )).eval()
    x = torch.zeros(3, 128, 128).numpy()
    table = build_table([(x, x, a) for a in range(4)], net)
    assert not table.use_stn
    assert lookup(table, 2).shape == (9, 9)
