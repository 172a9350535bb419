"""Shared fixtures: tiny network configs, synthetic datasets and toy experiments"""

import sys
from pathlib import Path

import pytest
import torch

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT))

from config import ExperimentConfig, RelightConfig, SegConfig, parse_experiment_config  # noqa: E402
from data import synth_generate  # noqa: E402
from netcore import default_precision  # noqa: E402

TINY_SEG = {
    'stem_channels': 8,
    'branch_channels': [4, 8, 16, 32],
    'blocks_per_branch': 1,
    'modules_per_stage': [1, 1, 1, 1],
    'head_mid_channels': 8,
    'num_classes': 19,
}
TINY_RELIGHT = {'base_channels': 4, 'num_res_blocks': 1, 'zero_init_last': True}


@pytest.fixture
def tiny_seg_config() -> SegConfig:
    return SegConfig(**TINY_SEG)


@pytest.fixture
def tiny_relight_config() -> RelightConfig:
    return RelightConfig(**TINY_RELIGHT)


@pytest.fixture
def double_precision():
    with default_precision(torch.float64):
        yield


@pytest.fixture
def synth_root(tmp_path) -> Path:
    """8 training and 4 validation night pairs, 32x32, 4 classes"""
    root = tmp_path / 'synth'
    synth_generate(root, 8, 32, 4, seed=1, night=True, split='train')
    synth_generate(root, 4, 32, 4, seed=1, night=True, split='val')
    return root


def toy_document(root: Path, **train_overrides) -> dict:
    train = {
        'max_iterations': 4,
        'batch_size': 2,
        'base_lr': 0.01,
        'seed': 0,
        'eval_interval': 2,
        'eval_batch_size': 2,
        'source': {'root': str(root), 'layout': 'synthetic'},
        'aug': {'crop_height': 32, 'crop_width': 32, 'scale_range': [1.0, 1.0]},
    }
    train.update(train_overrides)
    return {'version': 1, 'train': train, 'relight': dict(TINY_RELIGHT), 'seg': dict(TINY_SEG)}


@pytest.fixture
def toy_config(synth_root) -> ExperimentConfig:
    return parse_experiment_config(toy_document(synth_root))


@pytest.fixture
def adapt_config(synth_root) -> ExperimentConfig:
    return parse_experiment_config(toy_document(
        synth_root,
        adaptation={'adv_weight': 0.001, 'disc_lr': 1e-4, 'disc_channels': 4},
        target={'root': str(synth_root), 'layout': 'synthetic', 'train_split': 'val'},
    ))
