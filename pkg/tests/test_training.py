import csv

import pytest
import torch

import utils.dataset as dataset
import utils.training as training
from models import ConfigError, ModelConfig, NumericalError, TrainingAbortedError, Triplet
from utils.worldmodel import WorldModel


@pytest.fixture
def small_config():
    """Narrow layers with the full layer structure"""
    return ModelConfig(
        encoder_channels=[8, 8, 8, 8, 8, 8, 8],
        motion_channels=[8, 8, 8, 8, 8, 8, 8],
        motion_hidden=32,
        decoder_channels=[8, 8, 8, 8, 3],
        interaction_channels=[8, 8, 16, 16, 16],
    )


@pytest.fixture
def tiny_manifest(tmp_path):
    """Three short gridworld trajectories, 12 triplets"""
    return dataset.generate('gridworld', 3, seed=4, out_dir=tmp_path / 'data', length=6, workers=0)


@pytest.fixture
def tiny_run_config():
    return training.resolve_training_config({'epochs': 2, 'batch_size': 4, 'max_triplets': None, 'seed': 1})


class EchoModel(torch.nn.Module):
    """Predicts the target exactly on both paths"""

    def joint_predict(self, x_prev, x_curr, x_next):
        return x_next.clone(), x_next.clone()


class NanModel(torch.nn.Module):
    def joint_predict(self, x_prev, x_curr, x_next):
        return torch.full_like(x_next, float('nan')), x_next


def random_triplet(seed=0):
    generator = torch.Generator().manual_seed(seed)
    frames = [(torch.rand(3, 128, 128, generator=generator) * 2 - 1).numpy() for _ in range(3)]
    return Triplet(*frames)


def read_losses(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def test_loss_zero_for_perfect_predictions():
    """Test both terms vanish when predictions equal the target"""
    breakdown = training.compute_loss(EchoModel(), random_triplet())
    assert breakdown.as_floats() == {'total': 0.0, 'recon_extractor': 0.0, 'recon_interaction': 0.0}


def test_loss_terms_non_negative(small_config):
    """Test each term is non-negative and they sum to the total"""
    torch.manual_seed(0)
    model = WorldModel(small_config)
    values = training.compute_loss(model, random_triplet(1)).as_floats()
    assert values['recon_extractor'] >= 0.0
    assert values['recon_interaction'] >= 0.0
    assert values['total'] == pytest.approx(values['recon_extractor'] + values['recon_interaction'], rel=1e-6)


def test_one_step_reduces_loss(small_config):
    """Test a single Adam step lowers the loss of the triplet it was taken on"""
    torch.manual_seed(0)
    model = WorldModel(small_config)
    optimizer = training.make_optimizer(model, training.resolve_training_config())
    triplet = random_triplet(2)
    before = training.training_step(model, optimizer, triplet)['total']
    with torch.no_grad():
        after = training.compute_loss(model, triplet).as_floats()['total']
    assert after < before


def test_nonfinite_loss_raises_with_dump(tmp_path):
    """Test a NaN prediction raises NumericalError and writes diagnostics"""
    with pytest.raises(NumericalError):
        training.compute_loss(NanModel(), random_triplet(), dump_dir=tmp_path)
    assert (tmp_path / 'nonfinite_dump.json').exists()


def test_resolve_training_config():
    """Test desk defaults, paper-scale profile and unknown keys"""
    assert training.resolve_training_config()['epochs'] == 10
    assert training.resolve_training_config()['max_triplets'] == 2000
    paper = training.resolve_training_config(paper_scale=True)
    assert paper['epochs'] == 50 and paper['max_triplets'] is None
    assert training.resolve_training_config({'epochs': 3}, paper_scale=True)['epochs'] == 3
    with pytest.raises(ConfigError):
        training.resolve_training_config({'learning_rte': 0.1})


def test_train_writes_checkpoint_per_epoch(tiny_manifest, tiny_run_config, small_config, tmp_path, monkeypatch):
    """Test the loss CSV and one checkpoint per epoch, without touching action labels"""
    def forbidden(traj_dir):
        raise AssertionError(f"action labels read from {traj_dir}")

    monkeypatch.setattr(dataset, '_read_actions', forbidden)
    result = training.train(tiny_manifest, tiny_run_config, tmp_path / 'run', model_config=small_config)

    assert len(list((tmp_path / 'run').glob('ckpt_epoch_*.pt'))) == 2
    assert result['checkpoint'].name == 'ckpt_epoch_002.pt'
    rows = read_losses(tmp_path / 'run' / 'losses.csv')
    assert [int(row['epoch']) for row in rows] == [1, 2]
    assert list(rows[0]) == training.LOSS_COLUMNS
    assert int(rows[-1]['step']) == 2 * 3


def test_train_is_reproducible(tiny_manifest, tiny_run_config, small_config, tmp_path):
    """Test identical seeds give identical loss curves"""
    training.train(tiny_manifest, tiny_run_config, tmp_path / 'a', model_config=small_config)
    training.train(tiny_manifest, tiny_run_config, tmp_path / 'b', model_config=small_config)
    first = read_losses(tmp_path / 'a' / 'losses.csv')
    second = read_losses(tmp_path / 'b' / 'losses.csv')
    for row_a, row_b in zip(first, second):
        for column in ('total', 'recon_extractor', 'recon_interaction'):
            assert float(row_a[column]) == pytest.approx(float(row_b[column]), abs=1e-6)


def test_train_abort_keeps_last_checkpoint(tiny_manifest, tiny_run_config, small_config, tmp_path, monkeypatch):
    """Test a non-finite loss in epoch 2 aborts with the epoch 1 checkpoint retained"""
    real_step = training.training_step
    calls = {'n': 0}

    def failing_step(*args, **kwargs):
        calls['n'] += 1
        if calls['n'] > 3:
            raise NumericalError("Non-finite loss")
        return real_step(*args, **kwargs)

    monkeypatch.setattr(training, 'training_step', failing_step)
    with pytest.raises(TrainingAbortedError) as excinfo:
        training.train(tiny_manifest, tiny_run_config, tmp_path / 'run', model_config=small_config)
    assert excinfo.value.last_checkpoint.name == 'ckpt_epoch_001.pt'
    assert excinfo.value.last_checkpoint.exists()


@pytest.mark.slow
def test_desk_scale_training_descends(tmp_path):
    """Test the desk profile cuts the total loss to a fifth and lowers both terms"""
    manifest = dataset.generate('gridworld', 80, seed=0, out_dir=tmp_path / 'data', workers=0)
    assert manifest.triplet_count >= 2000
    result = training.train(manifest, training.resolve_training_config(), tmp_path / 'run')
    history = result['history']
    assert history[-1]['total'] <= 0.2 * history[0]['total']
    assert history[-1]['recon_extractor'] < history[0]['recon_extractor']
    assert history[-1]['recon_interaction'] < history[0]['recon_interaction']
