import numpy as np
import pytest
import torch

from ssp_sam.config import BackboneConfig, ModelConfig

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_bcfg():
    # no warm-start: tests that need a trained stand-in build it explicitly
    return BackboneConfig(image_size=32, patch_size=8, feat_dim=32, prompt_dim=32, clip_heads=4,
                          warmstart_samples=0, seed=7)


@pytest.fixture
def tiny_mcfg():
    return ModelConfig(n_res=4, encoder_layers=1, encoder_heads=4, adapter_heads=4, ffn_mult=2)


def batch_from_samples(samples):
    images = torch.tensor(np.stack([s.image for s in samples]))
    ids = torch.tensor(np.stack([s.token_ids for s in samples]))
    mask = torch.tensor(np.stack([s.word_mask for s in samples]))
    return images, ids, mask


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if not LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(LINES):
        terminalreporter.write_line(LINES[key])
