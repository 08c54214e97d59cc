import numpy as np
import pytest
import torch

from cadis.config import TrainConfig
from cadis.degrade import DegradationProtocol, build_dataset, split_manifest
from cadis.imageio import save_image
from cadis.losses import LossWeights
from cadis.networks import NetConfig

RESULTS: list[str] = []  # acceptance lines, echoed in the terminal summary


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)


def tiny_net_config(resolution: int = 16, **kw) -> NetConfig:
    base = dict(
        resolution=resolution,
        enc_widths=(4, 6, 8, 8),
        convs_per_stage=(1, 1, 1, 1),
        content_widths=(4, 6, 8, 16),
        content_dim=8,
        mask_hidden=8,
        unet_base=4,
        unet_depth=2,
        film_hidden=8,
        disc_widths=(4, 6, 8),
        disc_head_padding=1,
        head_hidden=6,
    )
    base.update(kw)
    return NetConfig(**base)


def tiny_train_config(phase: str = "pretrain", **kw) -> TrainConfig:
    base = dict(phase=phase, epochs=1, batch_size=4, resize=16, seed=0, loss_weights=LossWeights(1.0, 0.1, 0.01))
    base.update(kw)
    return TrainConfig(**base)


def smooth_image(rng, size: int = 16) -> np.ndarray:
    """Random low-frequency RGB image in [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.zeros((size, size, 3))
    for c in range(3):
        a, b, p = rng.uniform(0.5, 3, 3)
        img[..., c] = 0.5 + 0.35 * np.sin(2 * np.pi * (a * xx + b * yy) + p)
    img += rng.uniform(-0.05, 0.05, img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def pristine_dir(tmp_path):
    d = tmp_path / "pristine"
    d.mkdir()
    r = np.random.default_rng(42)
    for i in range(6):
        save_image(smooth_image(r, 16), d / f"img{i}.png")
    return d


@pytest.fixture
def tiny_manifest(tmp_path, pristine_dir):
    proto = DegradationProtocol(kinds=("gaussian_blur", "gaussian_noise"), levels_per_kind=2)
    m = build_dataset(pristine_dir, proto, tmp_path / "data", seed=0)
    m = split_manifest(m, (0.5, 1 / 6, 1 / 3), seed=0)
    m.write(tmp_path / "data" / "manifest.jsonl")
    return m


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
