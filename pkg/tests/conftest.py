import numpy as np
import pytest
import torch

from advface.config import (
    DataConfig,
    EvalConfig,
    ExperimentConfig,
    ProtectionConfig,
    ReconConfig,
    RecognizerConfig,
)
from advface.synthetic import generate_dataset


@pytest.fixture(scope="session")
def face_root(tmp_path_factory):
    """A small deterministic synthetic dataset shared by the unit tests."""
    root = tmp_path_factory.mktemp("faces") / "tinyfaces"
    generate_dataset(root, n_identities=12, images_per_identity=6, image_size=32, seed=3)
    return root


@pytest.fixture()
def tiny_config(face_root, tmp_path):
    """Fast-everything config for unit tests that need the full pipeline types."""
    return ExperimentConfig(
        data=DataConfig(root=str(face_root), image_size=32, fractions=(0.3, 0.3, 0.25, 0.15),
                        num_pos_pairs=30, num_neg_pairs=30),
        recognizer=RecognizerConfig(widths=(8, 8, 16, 32), epochs=2, embedding_dim=16,
                                    ids_per_batch=4, imgs_per_id=3),
        recon=ReconConfig(arch="resrec", width=8, epochs=2, batch_size=16),
        protection=ProtectionConfig(alpha=0.2, epsilon=0.2, iterations=4, batch_size=8),
        eval=EvalConfig(folds=3, srra_enroll_per_identity=2, offline_epochs=1),
        seed=11,
        out_dir=str(tmp_path / "run"),
    )


class TinyDecoder(torch.nn.Module):
    """Minimal conv decoder: (C, H, W) features -> (3, 2H, 2W) images in [0,1]."""

    def __init__(self, c_in=4, width=6, with_bn=True):
        super().__init__()
        norm = torch.nn.BatchNorm2d(width) if with_bn else torch.nn.Identity()
        self.net = torch.nn.Sequential(
            torch.nn.Conv2d(c_in, width, 3, padding=1), norm, torch.nn.ReLU(),
            torch.nn.Upsample(scale_factor=2, mode="nearest"),
            torch.nn.Conv2d(width, 3, 3, padding=1), torch.nn.Sigmoid(),
        )

    def forward(self, z):
        return self.net(z)


class TinyExtractor(torch.nn.Module):
    """Maps (3, 2H, 2W) images back to (4, H, W) features (TinyDecoder's inverse shape)."""

    def __init__(self):
        super().__init__()
        self.conv = torch.nn.Conv2d(3, 4, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


@pytest.fixture()
def tiny_decoder():
    torch.manual_seed(0)
    model = TinyDecoder()
    model.eval()
    return model


@pytest.fixture()
def tiny_extractor():
    torch.manual_seed(1)
    model = TinyExtractor()
    model.eval()
    return model


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
