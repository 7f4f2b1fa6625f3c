"""Network definitions for the split recognizer, plus model handles and checkpoint IO.

The recognizer backbone is a small configurable CNN: six conv blocks, global
average pooling, and an embedding head with a linear classifier on top. The
first ``split_index`` conv blocks form the client-side feature extractor; the
rest plus the head form the server-side tail, so tail(extractor(x)) is exactly
the unsplit forward pass (the two views share the underlying modules).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

CHECKPOINT_VERSION = 1


@dataclass
class TrainedModel:
    """Immutable handle to a trained network plus its architecture metadata."""

    module: nn.Module
    kind: str
    meta: dict = field(default_factory=dict)

    def fingerprint(self) -> str:
        return module_fingerprint(self.module)


def module_fingerprint(module: nn.Module) -> str:
    """Stable hash of all parameters and buffers, for provenance checks."""
    h = hashlib.sha256()
    state = module.state_dict()
    for key in sorted(state):
        h.update(key.encode())
        h.update(state[key].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


class ConvBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 1, affine: bool = True):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(c_out, affine=affine)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class FaceBackbone(nn.Module):
    """Six-block CNN with an embedding head and a linear classifier.

    split_index marks the client/server boundary; the boundary block's BN has
    no affine terms, which pins the transmitted feature scale independently of
    training (the features cross a wire, so a stable dynamic range matters).
    """

    def __init__(self, widths=(16, 32, 64, 128), embedding_dim: int = 64, n_classes: int = 2,
                 strides=(2, 1, 1, 2, 1, 2), split_index: int = 3):
        super().__init__()
        w1, w2, w3, w4 = widths
        chans = [3, w1, w1, w2, w3, w3, w4]
        self.blocks = nn.ModuleList([
            ConvBlock(chans[i], chans[i + 1], stride=strides[i],
                      affine=(i != split_index - 1))
            for i in range(6)
        ])
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.embed_fc = nn.Linear(w4, embedding_dim)
        self.classifier = nn.Linear(embedding_dim, n_classes)

    def forward_from(self, x: torch.Tensor, start: int = 0) -> torch.Tensor:
        """Run blocks[start:] and the embedding head; returns unnormalized embeddings."""
        for block in self.blocks[start:]:
            x = block(x)
        x = self.pool(x).flatten(1)
        return self.embed_fc(x)

    def forward(self, x):
        emb = self.forward_from(x, 0)
        return emb, self.classifier(emb)


class FeatureExtractor(nn.Module):
    """Client-side front: the first split_index conv blocks of a backbone."""

    def __init__(self, backbone: FaceBackbone, split_index: int):
        super().__init__()
        self.blocks = nn.ModuleList(list(backbone.blocks[:split_index]))

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x


class RecognizerTail(nn.Module):
    """Server-side remainder: conv blocks after the split plus the heads."""

    def __init__(self, backbone: FaceBackbone, split_index: int):
        super().__init__()
        self.blocks = nn.ModuleList(list(backbone.blocks[split_index:]))
        self.pool = backbone.pool
        self.embed_fc = backbone.embed_fc
        self.classifier = backbone.classifier

    def forward(self, feature):
        x = feature
        for block in self.blocks:
            x = block(x)
        x = self.pool(x).flatten(1)
        emb = self.embed_fc(x)
        return emb, self.classifier(emb)


def images_to_tensor(images) -> torch.Tensor:
    """(N, S, S, 3) float images in [0,1] (or a list of FaceImage) to NCHW float32."""
    if isinstance(images, (list, tuple)):
        images = np.stack([im.pixels if hasattr(im, "pixels") else im for im in images])
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def tensor_to_images(t: torch.Tensor) -> np.ndarray:
    """NCHW float tensor to (N, S, S, 3) float32 numpy."""
    return t.detach().permute(0, 2, 3, 1).contiguous().cpu().numpy().astype(np.float32)


def save_checkpoint(path: str | Path, kind: str, state_dict: dict, meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {"format_version": CHECKPOINT_VERSION, "kind": kind, "meta": meta, "state": state_dict},
        path,
    )


def load_checkpoint(path: str | Path, expected_kind: str | None = None) -> dict:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob.get('format_version')}")
    if expected_kind is not None and blob.get("kind") != expected_kind:
        raise ValueError(f"{path}: expected a {expected_kind!r} checkpoint, found {blob.get('kind')!r}")
    return blob
