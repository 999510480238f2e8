import os
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

settings.register_profile('fast', max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.register_profile('thorough', max_examples=500, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile(os.getenv('HYPOTHESIS_PROFILE', 'fast'))


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False,
                     help='run the directional experiments marked slow')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: directional experiment, needs --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def strict_float():
    """Division by zero and invalid operations raise inside numerics tests."""
    with np.errstate(divide='raise', invalid='raise'):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg(tmp_path):
    from VOD.faim.utils import load_config
    return load_config(overrides={
        'image_size': 64, 'num_classes': 3, 'vo_channels': 8, 'feature_dim': 16, 'heads': 2,
        'mask_dim': 4, 'roi_size': 8, 'k': 50, 'n_cap': 6, 'm_train': 3, 'm_infer': 4,
        'num_train_clips': 2, 'num_val_clips': 2, 'frames_per_clip': 4, 'num_objects': 2,
        'warmup_iters': 1, 'pretrain_iters': 2, 'finetune_iters': 2, 'batch_clips': 1,
        'pretrain_frames': 2, 'checkpoint_every': 1, 'mask_max_proposals': 3,
        'data_dir': str(tmp_path / 'data'), 'run_root': str(tmp_path / 'runs')})
