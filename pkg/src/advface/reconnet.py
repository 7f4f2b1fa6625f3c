"""Feature-to-image reconstruction networks and their training.

Three interchangeable decoder families map extractor feature maps back to
RGB images in [0,1]:

* transrec — a mirrored stack of transposed convolutions,
* resrec  — residual blocks between nearest-neighbor upsampling stages,
* urec    — a small encoder/decoder with a skip connection (U-shaped).

The same architectures serve as the attacker's decoder and as the defender's
shadow model; the checkpoint records which role an instance was trained for
and on which data, so evaluation can enforce the train-data disjointness
contract.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import RECON_KINDS
from .data import DatasetManifest, load_faces
from .models import (
    TrainedModel,
    images_to_tensor,
    load_checkpoint,
    module_fingerprint,
    save_checkpoint,
    tensor_to_images,
)

log = logging.getLogger(__name__)


class BuildError(ValueError):
    """The feature shape cannot reach the image size through the upsampling chain."""


class TrainingError(RuntimeError):
    """Reconstruction training diverged (non-finite loss)."""


@dataclass
class ReconTrainLog:
    kind: str
    role: str                      # "attacker" | "shadow"
    epoch_losses: list[float] = field(default_factory=list)
    holdout_loss: float = float("nan")
    dataset_fingerprint: str = ""


def _upsample_stages(feature_hw: int, image_size: int) -> int:
    if feature_hw < 1 or image_size % feature_hw != 0:
        raise BuildError(f"feature side {feature_hw} does not divide image size {image_size}")
    ratio = image_size // feature_hw
    stages = ratio.bit_length() - 1
    if 2 ** stages != ratio or stages < 1:
        raise BuildError(
            f"image/feature ratio must be a power of two >= 2, got {image_size}/{feature_hw}"
        )
    return stages


def _tconv(c_in, c_out, stride):
    if stride == 1:
        return nn.ConvTranspose2d(c_in, c_out, 3, stride=1, padding=1)
    return nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1)


def _bn_act(c):
    return [nn.BatchNorm2d(c), nn.ReLU(inplace=True)]


class TransRec(nn.Module):
    """Layer-for-layer mirror of a conv stem, in transposed convolutions."""

    def __init__(self, feature_shape, image_size, width=32):
        super().__init__()
        c, h, w = feature_shape
        stages = _upsample_stages(h, image_size)
        layers: list[nn.Module] = [_tconv(c, 2 * width, 1), *_bn_act(2 * width)]
        ch = 2 * width
        for _ in range(stages):
            nxt = max(ch // 2, 8)
            layers += [_tconv(ch, nxt, 2), *_bn_act(nxt), _tconv(nxt, nxt, 1), *_bn_act(nxt)]
            ch = nxt
        layers += [_tconv(ch, 3, 1), nn.Sigmoid()]
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z)


class ResidualBlock(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(c, c, 3, padding=1), nn.BatchNorm2d(c), nn.ReLU(inplace=True),
            nn.Conv2d(c, c, 3, padding=1), nn.BatchNorm2d(c),
        )
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(x + self.body(x))


class UpsampleConv(nn.Module):
    """Nearest-neighbor x2 then conv; avoids transposed-conv checkerboarding."""

    def __init__(self, c_in, c_out):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.conv = nn.Sequential(nn.Conv2d(c_in, c_out, 3, padding=1), *_bn_act(c_out))

    def forward(self, x):
        return self.conv(self.up(x))


class ResRec(nn.Module):
    """Residual blocks between upsampling stages."""

    def __init__(self, feature_shape, image_size, width=32):
        super().__init__()
        c, h, w = feature_shape
        stages = _upsample_stages(h, image_size)
        layers: list[nn.Module] = [_tconv(c, 2 * width, 1), *_bn_act(2 * width)]
        ch = 2 * width
        layers += [ResidualBlock(ch), ResidualBlock(ch)]
        for _ in range(stages):
            nxt = max(ch // 2, 8)
            layers += [UpsampleConv(ch, nxt), ResidualBlock(nxt), ResidualBlock(nxt)]
            ch = nxt
        layers += [nn.Conv2d(ch, 3, 1), nn.Sigmoid()]
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z)


class URec(nn.Module):
    """Encoder/decoder over the feature map with a skip connection."""

    def __init__(self, feature_shape, image_size, width=32):
        super().__init__()
        c, h, w = feature_shape
        stages = _upsample_stages(h, image_size)
        if h < 2:
            raise BuildError(f"feature side {h} too small for the encoder branch")
        self.enc1 = nn.Sequential(nn.Conv2d(c, width, 3, padding=1), *_bn_act(width))
        self.down = nn.Sequential(nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
                                  *_bn_act(2 * width))
        self.mid = nn.Sequential(nn.Conv2d(2 * width, 2 * width, 3, padding=1),
                                 *_bn_act(2 * width))
        self.up0 = UpsampleConv(2 * width, width)
        self.fuse = nn.Sequential(nn.Conv2d(2 * width, width, 3, padding=1), *_bn_act(width))
        ups, ch = [], width
        for _ in range(stages):
            nxt = max(ch // 2, 8)
            ups.append(UpsampleConv(ch, nxt))
            ch = nxt
        self.ups = nn.Sequential(*ups)
        self.head = nn.Sequential(nn.Conv2d(ch, 3, 3, padding=1), nn.Sigmoid())

    def forward(self, z):
        e1 = self.enc1(z)
        x = self.mid(self.down(e1))
        x = self.up0(x)
        x = self.fuse(torch.cat([x, e1], dim=1))
        return self.head(self.ups(x))


_ARCHS = {"transrec": TransRec, "resrec": ResRec, "urec": URec}


def build_recon(kind: str, feature_shape, image_size: int, width: int = 32,
                seed: int | None = None) -> TrainedModel:
    """Construct an untrained reconstruction network of the requested family."""
    if kind not in _ARCHS:
        raise BuildError(f"unknown reconstruction architecture {kind!r}; choose from {RECON_KINDS}")
    c, h, w = feature_shape
    if h != w:
        raise BuildError(f"feature maps must be square, got {feature_shape}")
    if seed is not None:
        torch.manual_seed(seed)
    module = _ARCHS[kind](tuple(feature_shape), image_size, width)
    module.eval()
    return TrainedModel(module, kind, {
        "feature_shape": tuple(feature_shape),
        "image_size": image_size,
        "width": width,
        "role": "untrained",
    })


def manifest_fingerprint(manifest: DatasetManifest) -> str:
    return hashlib.sha256(manifest.to_json().encode()).hexdigest()[:16]


def mean_l1(model: nn.Module, feats: torch.Tensor, images: torch.Tensor,
            batch_size: int = 64) -> float:
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for zb, xb in zip(feats.split(batch_size), images.split(batch_size)):
            total += float((model(zb) - xb).abs().mean()) * len(zb)
            count += len(zb)
    return total / max(count, 1)


def train_recon(model: TrainedModel, manifest: DatasetManifest, extractor: TrainedModel,
                epochs: int, lr: float, batch_size: int, seed: int, role: str,
                holdout_fraction: float = 0.1,
                image_size: int | None = None) -> tuple[TrainedModel, ReconTrainLog]:
    """Train a decoder to invert the (frozen) extractor by per-pixel L1 loss."""
    image_size = image_size or model.meta["image_size"]
    log_rec = ReconTrainLog(kind=model.kind, role=role,
                            dataset_fingerprint=manifest_fingerprint(manifest))
    if epochs == 0:
        return model, log_rec

    faces = load_faces(manifest, image_size)
    images = images_to_tensor(faces)
    ext = extractor.module
    ext.eval()
    with torch.no_grad():
        feats = torch.cat([ext(chunk) for chunk in images.split(64)])

    gen = torch.Generator().manual_seed(seed)
    perm = torch.randperm(len(images), generator=gen)
    n_hold = int(len(images) * holdout_fraction)
    hold, train = perm[:n_hold], perm[n_hold:]

    torch.manual_seed(seed)
    net = model.module
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    crit = nn.L1Loss()
    net.train()
    for epoch in range(epochs):
        order = train[torch.randperm(len(train), generator=gen)]
        total, count = 0.0, 0
        for idx in order.split(batch_size):
            loss = crit(net(feats[idx]), images[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"reconstruction loss non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        log_rec.epoch_losses.append(total / max(count, 1))
        log.info("%s/%s epoch %d/%d L1 %.4f", model.kind, role, epoch + 1, epochs,
                 log_rec.epoch_losses[-1])
    net.eval()
    if n_hold:
        log_rec.holdout_loss = mean_l1(net, feats[hold], images[hold])

    meta = dict(model.meta)
    meta.update(role=role, dataset_fingerprint=log_rec.dataset_fingerprint,
                extractor_fingerprint=module_fingerprint(ext))
    return TrainedModel(net, model.kind, meta), log_rec


def reconstruct(model: TrainedModel, features, batch_size: int = 64) -> np.ndarray:
    """Decode features to images; (N, S, S, 3) float32 in [0,1], deterministic."""
    feats = features if isinstance(features, torch.Tensor) else torch.as_tensor(
        np.asarray(features, dtype=np.float32))
    if feats.ndim == 3:
        feats = feats[None]
    expected = tuple(model.meta.get("feature_shape", feats.shape[1:]))
    if tuple(feats.shape[1:]) != expected:
        raise ValueError(f"feature shape {tuple(feats.shape[1:])} does not match "
                         f"model input {expected}")
    net = model.module
    net.eval()
    outs = []
    with torch.no_grad():
        for chunk in feats.split(batch_size):
            outs.append(net(chunk))
    return tensor_to_images(torch.cat(outs))


def save_recon(model: TrainedModel, train_log: ReconTrainLog | None, path: str | Path) -> None:
    meta = dict(model.meta)
    if train_log is not None:
        meta["train_log"] = {
            "epoch_losses": train_log.epoch_losses,
            "holdout_loss": train_log.holdout_loss,
            "role": train_log.role,
            "dataset_fingerprint": train_log.dataset_fingerprint,
        }
    save_checkpoint(path, f"recon:{model.kind}", model.module.state_dict(), meta)


def load_recon(path: str | Path) -> TrainedModel:
    blob = load_checkpoint(path)
    kind = blob["kind"].split(":", 1)[1]
    meta = blob["meta"]
    model = build_recon(kind, tuple(meta["feature_shape"]), meta["image_size"], meta["width"])
    model.module.load_state_dict(blob["state"])
    model.module.eval()
    return TrainedModel(model.module, kind, meta)
