"""Split face recognizer: training, feature extraction, verification, offline retraining.

Training uses cross-entropy plus batch-hard triplet loss (margin 0.2) over
P*K identity-balanced batches, Adam with per-epoch exponential LR decay.
Verification is squared Euclidean distance between L2-normalized embeddings
against a k-fold calibrated threshold.
"""

from __future__ import annotations

import copy
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import RecognizerConfig, ConfigError
from .data import DatasetManifest, PairList, load_faces, load_image, preprocess
from .models import (
    FaceBackbone,
    FeatureExtractor,
    RecognizerTail,
    TrainedModel,
    images_to_tensor,
    load_checkpoint,
    module_fingerprint,
    save_checkpoint,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


@dataclass
class SplitRecognizer:
    extractor: TrainedModel
    tail: TrainedModel
    backbone: FaceBackbone
    split_index: int
    embedding_dim: int
    image_size: int
    widths: tuple
    classes: list[str]
    feature_shape: tuple      # (C, H, W) of the extractor output
    train_log: list[float] = field(default_factory=list)

    def extractor_fingerprint(self) -> str:
        return module_fingerprint(self.extractor.module)


@dataclass
class VerificationThreshold:
    value: float
    calibration_folds: int
    accuracy: float


def _feature_shape(extractor: nn.Module, image_size: int) -> tuple:
    with torch.no_grad():
        out = extractor(torch.zeros(1, 3, image_size, image_size))
    return tuple(out.shape[1:])


def batch_hard_triplet_loss(embeddings: torch.Tensor, labels: torch.Tensor,
                            margin: float) -> torch.Tensor:
    """Hardest-positive / hardest-negative triplet loss on normalized embeddings."""
    emb = nn.functional.normalize(embeddings, dim=1)
    dist = torch.cdist(emb, emb)
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool)
    pos_mask = same & ~eye
    neg_mask = ~same
    valid = pos_mask.any(1) & neg_mask.any(1)
    if not valid.any():
        return embeddings.new_zeros(())
    hardest_pos = torch.where(pos_mask, dist, torch.full_like(dist, -math.inf)).max(1).values
    hardest_neg = torch.where(neg_mask, dist, torch.full_like(dist, math.inf)).min(1).values
    loss = torch.relu(hardest_pos - hardest_neg + margin)
    return loss[valid].mean()


def _pk_batches(labels: list[int], ids_per_batch: int, imgs_per_id: int,
                rng: random.Random) -> list[list[int]]:
    """Identity-balanced batch plan for one epoch (P identities x K images)."""
    by_label: dict[int, list[int]] = {}
    for idx, lab in enumerate(labels):
        by_label.setdefault(lab, []).append(idx)
    for idxs in by_label.values():
        rng.shuffle(idxs)
    order = sorted(by_label)
    rng.shuffle(order)
    batches, cursor = [], {lab: 0 for lab in order}
    pending = [lab for lab in order if len(by_label[lab]) >= 2]
    while pending:
        chosen = pending[:ids_per_batch]
        batch = []
        for lab in chosen:
            take = by_label[lab][cursor[lab]:cursor[lab] + imgs_per_id]
            cursor[lab] += len(take)
            batch.extend(take)
        pending = [lab for lab in pending if cursor[lab] < len(by_label[lab])]
        if len(batch) >= 2:
            batches.append(batch)
    return batches


def train_recognizer(manifest: DatasetManifest, config: RecognizerConfig,
                     image_size: int, seed: int) -> SplitRecognizer:
    """Train the backbone with CE + triplet loss and return it split at split_index."""
    identities = manifest.identities
    by_id: dict[str, int] = {}
    for ident, _ in manifest.entries:
        by_id[ident] = by_id.get(ident, 0) + 1
    if len(identities) < 2 or sorted(by_id.values())[-1] < 2 or \
            sum(1 for v in by_id.values() if v >= 2) < 2:
        raise ConfigError("recognizer training needs >= 2 identities with >= 2 images each")

    torch.manual_seed(seed)
    classes = sorted(identities)
    class_index = {c: i for i, c in enumerate(classes)}
    backbone = FaceBackbone(config.widths, config.embedding_dim, len(classes),
                            strides=config.strides, split_index=config.split_index)

    faces = load_faces(manifest, image_size)
    images = images_to_tensor(faces)
    labels = [class_index[f.identity] for f in faces]
    label_tensor = torch.tensor(labels)

    opt = torch.optim.Adam(backbone.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=config.lr_decay)
    ce = nn.CrossEntropyLoss()
    rng = random.Random(seed)

    epoch_losses: list[float] = []
    backbone.train()
    for epoch in range(config.epochs):
        batches = _pk_batches(labels, config.ids_per_batch, config.imgs_per_id, rng)
        total, count = 0.0, 0
        for batch in batches:
            idx = torch.tensor(batch)
            emb, logits = backbone(images[idx])
            loss = ce(logits, label_tensor[idx]) \
                + config.triplet_weight * batch_hard_triplet_loss(emb, label_tensor[idx], config.triplet_margin)
            if not torch.isfinite(loss):
                raise TrainingError(f"loss became non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
            count += 1
        sched.step()
        epoch_losses.append(total / max(count, 1))
        log.info("recognizer epoch %d/%d loss %.4f", epoch + 1, config.epochs, epoch_losses[-1])

    backbone.eval()
    extractor = FeatureExtractor(backbone, config.split_index)
    tail = RecognizerTail(backbone, config.split_index)
    feature_shape = _feature_shape(extractor, image_size)
    return SplitRecognizer(
        extractor=TrainedModel(extractor, "extractor", {"feature_shape": feature_shape}),
        tail=TrainedModel(tail, "tail", {}),
        backbone=backbone,
        split_index=config.split_index,
        embedding_dim=config.embedding_dim,
        image_size=image_size,
        widths=tuple(config.widths),
        classes=classes,
        feature_shape=feature_shape,
        train_log=epoch_losses,
    )


def extract_features(recognizer: SplitRecognizer, images, batch_size: int = 64) -> np.ndarray:
    """Client-side features for a batch of images; (N, C, H, W) float32."""
    tensor = images if isinstance(images, torch.Tensor) else images_to_tensor(images)
    if tuple(tensor.shape[1:]) != (3, recognizer.image_size, recognizer.image_size):
        raise ValueError(
            f"expected (N, 3, {recognizer.image_size}, {recognizer.image_size}) images, got {tuple(tensor.shape)}"
        )
    module = recognizer.extractor.module
    module.eval()
    outs = []
    with torch.no_grad():
        for chunk in tensor.split(batch_size):
            outs.append(module(chunk))
    feats = torch.cat(outs)
    if tuple(feats.shape[1:]) != tuple(recognizer.feature_shape):
        raise RuntimeError(
            f"extractor produced {tuple(feats.shape[1:])}, expected {tuple(recognizer.feature_shape)}"
        )
    return feats.numpy().astype(np.float32)


def embed(recognizer: SplitRecognizer, features, batch_size: int = 256) -> np.ndarray:
    """Map features to L2-normalized identity embeddings; (N, D) float32."""
    feats = features if isinstance(features, torch.Tensor) else torch.as_tensor(
        np.asarray(features, dtype=np.float32))
    if feats.ndim == 3:
        feats = feats[None]
    if tuple(feats.shape[1:]) != tuple(recognizer.feature_shape):
        raise ValueError(f"feature shape {tuple(feats.shape[1:])} does not match "
                         f"extractor output {tuple(recognizer.feature_shape)}")
    if not torch.isfinite(feats).all():
        raise ValueError("features contain non-finite values")
    module = recognizer.tail.module
    module.eval()
    outs = []
    with torch.no_grad():
        for chunk in feats.split(batch_size):
            emb, _ = module(chunk)
            outs.append(nn.functional.normalize(emb, dim=1))
    return torch.cat(outs).numpy().astype(np.float32)


def squared_distances(emb_a: np.ndarray, emb_b: np.ndarray) -> np.ndarray:
    return np.sum((emb_a - emb_b) ** 2, axis=1)


def _best_threshold(dists: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Exact accuracy-maximizing threshold (accept iff dist <= threshold)."""
    order = np.argsort(dists, kind="stable")
    d, y = dists[order], labels[order]
    n = len(d)
    # accepting the first k pairs: correct = positives among them + negatives after
    pos_prefix = np.concatenate([[0], np.cumsum(y)])
    total_neg = n - pos_prefix[-1]
    correct = pos_prefix + (total_neg - (np.arange(n + 1) - pos_prefix))
    best_k = int(np.argmax(correct))
    if best_k == 0:
        thr = float(d[0]) / 2 if n else 0.0
    elif best_k == n:
        thr = float(d[-1]) + 1e-6
    else:
        thr = float(d[best_k - 1] + d[best_k]) / 2
    # recompute at the chosen threshold so ties at the cut cannot skew the report
    acc = float(np.mean((dists <= thr) == labels))
    return thr, acc


def calibrate_from_distances(dists: np.ndarray, labels: np.ndarray,
                             folds: int) -> VerificationThreshold:
    dists = np.asarray(dists, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if len(dists) == 0 or labels.all() or not labels.any():
        raise ConfigError("calibration needs both positive and negative pairs")
    folds = max(1, min(folds, len(dists)))
    if folds == 1:
        thr, acc = _best_threshold(dists, labels)
        return VerificationThreshold(value=thr, calibration_folds=1, accuracy=acc)
    fold_of = np.arange(len(dists)) % folds
    accs = []
    for k in range(folds):
        train, test = fold_of != k, fold_of == k
        if labels[train].all() or not labels[train].any():
            continue
        thr_k, _ = _best_threshold(dists[train], labels[train])
        accs.append(float(np.mean((dists[test] <= thr_k) == labels[test])))
    thr, _ = _best_threshold(dists, labels)
    if not accs:
        raise ConfigError("every calibration fold was single-class; use fewer folds")
    return VerificationThreshold(value=thr, calibration_folds=folds,
                                 accuracy=float(np.mean(accs)))


def calibrate_threshold(recognizer: SplitRecognizer, pairs: PairList, folds: int,
                        feature_fn=None) -> VerificationThreshold:
    """k-fold pair-verification calibration.

    feature_fn, when given, maps raw extractor features (N, C, H, W) to the
    features actually verified (e.g. a protection defense); identity == raw.
    """
    dists, labels = pair_distances(recognizer, pairs, feature_fn)
    return calibrate_from_distances(dists, labels, folds)


def pair_distances(recognizer: SplitRecognizer, pairs: PairList,
                   feature_fn=None) -> tuple[np.ndarray, np.ndarray]:
    rels = sorted({p for a, b, _ in pairs.pairs for p in (a, b)})
    images = [preprocess(load_image(pairs.root / rel), recognizer.image_size) for rel in rels]
    feats = extract_features(recognizer, images)
    if feature_fn is not None:
        feats = feature_fn(feats)
    embs = embed(recognizer, feats)
    emb_of = {rel: embs[i] for i, rel in enumerate(rels)}
    dists = np.array([np.sum((emb_of[a] - emb_of[b]) ** 2) for a, b, _ in pairs.pairs])
    labels = np.array([same for _, _, same in pairs.pairs], dtype=bool)
    return dists, labels


def verify_pair(recognizer: SplitRecognizer, feat_a, feat_b,
                threshold: VerificationThreshold) -> bool:
    emb = embed(recognizer, np.stack([np.asarray(feat_a), np.asarray(feat_b)]))
    return bool(np.sum((emb[0] - emb[1]) ** 2) <= threshold.value)


def offline_retrain_tail(recognizer: SplitRecognizer, features: np.ndarray,
                         identities: list[str], epochs: int, lr: float,
                         seed: int, triplet_margin: float = 0.2,
                         batch_size: int = 64) -> SplitRecognizer:
    """Retrain only the server tail on stored (adversarial) features with labels.

    The extractor is shared untouched; the stored features are never modified.
    Identities outside the recognizer's training classes get a fresh
    classification head sized to the retraining label set.
    """
    retrained = copy.deepcopy(recognizer)
    if epochs == 0:
        return retrained
    tail: RecognizerTail = retrained.tail.module

    label_names = sorted(set(identities))
    if set(label_names) <= set(retrained.classes):
        class_index = {c: i for i, c in enumerate(retrained.classes)}
    else:
        class_index = {c: i for i, c in enumerate(label_names)}
        torch.manual_seed(seed)
        tail.classifier = nn.Linear(tail.classifier.in_features, len(label_names))
        retrained.backbone.classifier = tail.classifier
    labels = torch.tensor([class_index[i] for i in identities])
    feats = torch.as_tensor(np.asarray(features, dtype=np.float32))

    torch.manual_seed(seed + 1)
    opt = torch.optim.Adam(tail.parameters(), lr=lr)
    ce = nn.CrossEntropyLoss()
    rng = random.Random(seed)
    tail.train()
    for epoch in range(epochs):
        batches = _pk_batches(labels.tolist(), ids_per_batch=8, imgs_per_id=4, rng=rng)
        for batch in batches:
            idx = torch.tensor(batch)
            emb, logits = tail(feats[idx])
            loss = ce(logits, labels[idx]) + batch_hard_triplet_loss(emb, labels[idx], triplet_margin)
            if not torch.isfinite(loss):
                raise TrainingError(f"tail retraining diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
    tail.eval()
    return retrained


def save_recognizer(recognizer: SplitRecognizer, path: str | Path) -> None:
    meta = {
        "widths": list(recognizer.widths),
        "strides": [int(b.conv.stride[0]) for b in recognizer.backbone.blocks],
        "split_index": recognizer.split_index,
        "embedding_dim": recognizer.embedding_dim,
        "image_size": recognizer.image_size,
        "classes": recognizer.classes,
        "feature_shape": list(recognizer.feature_shape),
        "train_log": recognizer.train_log,
    }
    save_checkpoint(path, "recognizer", recognizer.backbone.state_dict(), meta)


def load_recognizer(path: str | Path) -> SplitRecognizer:
    blob = load_checkpoint(path, "recognizer")
    meta = blob["meta"]
    backbone = FaceBackbone(tuple(meta["widths"]), meta["embedding_dim"], len(meta["classes"]),
                            strides=tuple(meta.get("strides", (2, 1, 1, 2, 1, 2))),
                            split_index=meta["split_index"])
    backbone.load_state_dict(blob["state"])
    backbone.eval()
    extractor = FeatureExtractor(backbone, meta["split_index"])
    tail = RecognizerTail(backbone, meta["split_index"])
    return SplitRecognizer(
        extractor=TrainedModel(extractor, "extractor", {"feature_shape": tuple(meta["feature_shape"])}),
        tail=TrainedModel(tail, "tail", {}),
        backbone=backbone,
        split_index=meta["split_index"],
        embedding_dim=meta["embedding_dim"],
        image_size=meta["image_size"],
        widths=tuple(meta["widths"]),
        classes=list(meta["classes"]),
        feature_shape=tuple(meta["feature_shape"]),
        train_log=list(meta.get("train_log", [])),
    )
