import numpy as np
import pytest
import torch

from bridgevoc.spectral import save_wav


def make_test_clip(path, sr=22050, seconds=1.0, seed=0, f0=220.0):
    """Synthetic voiced-ish clip: decaying harmonics plus a little noise."""
    rng = np.random.default_rng(seed)
    t = np.arange(int(sr * seconds)) / sr
    wave = np.zeros_like(t)
    for h in range(1, 9):
        wave += (0.5 / h) * np.sin(2 * np.pi * f0 * h * t + rng.uniform(0, 2 * np.pi))
    wave += 0.01 * rng.standard_normal(len(t))
    wave *= 0.5 / np.abs(wave).max()
    save_wav(path, wave.astype(np.float32), sr)
    return path


@pytest.fixture
def clip_path(tmp_path):
    return make_test_clip(tmp_path / "clip.wav")


@pytest.fixture(autouse=True)
def _single_thread():
    # keep CPU test timing stable
    torch.set_num_threads(max(1, torch.get_num_threads()))
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def torch_gen():
    g = torch.Generator()
    g.manual_seed(1234)
    return g


@pytest.fixture
def tiny_bcd_config():
    from bridgevoc.bcd import BCDConfig

    # 64 net bins in two regions of 2 subbands each
    return BCDConfig(
        regions=((32, 16, 16, 3, 1), (32, 16, 16, 3, 1)),
        channels=32,
        num_blocks=2,
        lk_kernel_f=5,
        lk_kernel_t=7,
        time_embed_dim=32,
        sola_rank=8,
    )
