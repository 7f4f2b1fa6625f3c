"""Dataset ingestion, preprocessing, and the pair-verification protocol files.

Dataset layout on disk: ``root/<identity>/<image files>``, one directory per
identity, images pre-aligned face crops (no detection or landmarking here).
Pair files are TSV with columns (path_a, path_b, same: 0/1), paths relative
to the dataset root.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .config import SPLIT_NAMES, ConfigError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


@dataclass
class FaceImage:
    """An aligned RGB face crop with intensities in [0, 1], shape (S, S, 3)."""

    pixels: np.ndarray
    identity: str = ""
    source_id: str = ""

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3 or p.shape[0] != p.shape[1]:
            raise ValueError(f"FaceImage pixels must be square (S, S, 3), got {p.shape}")
        if p.min() < 0.0 or p.max() > 1.0:
            raise ValueError("FaceImage intensities must lie in [0, 1]")


@dataclass
class DatasetManifest:
    """One split's worth of (identity, relative image path) entries."""

    root: Path
    split: str
    entries: list[tuple[str, str]] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.entries)

    @property
    def identities(self) -> list[str]:
        seen: dict[str, None] = {}
        for ident, _ in self.entries:
            seen.setdefault(ident)
        return list(seen)

    def paths(self) -> list[Path]:
        return [self.root / rel for _, rel in self.entries]

    def to_json(self) -> str:
        return json.dumps(
            {"root": str(self.root), "split": self.split, "entries": self.entries},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        raw = json.loads(text)
        return cls(
            root=Path(raw["root"]),
            split=raw["split"],
            entries=[tuple(e) for e in raw["entries"]],
        )


@dataclass
class PairList:
    """Verification pairs over the eval split: (rel path a, rel path b, same identity)."""

    root: Path
    pairs: list[tuple[str, str, bool]]

    def __post_init__(self):
        labels = {same for _, _, same in self.pairs}
        if labels != {True, False}:
            raise ValueError("pair list needs at least one positive and one negative pair")


def load_dataset(root: str | Path, fractions, seed: int) -> dict[str, DatasetManifest]:
    """Split `root/<identity>/*` into the four roles at identity level.

    The split is a seeded shuffle of the sorted identity list, cut at
    round(cumsum(fractions) * n) boundaries, so a fixed seed gives a
    deterministic, disjoint partition.
    """
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"dataset root {root} does not exist or is not a directory")
    if len(fractions) != len(SPLIT_NAMES):
        raise ConfigError(f"need {len(SPLIT_NAMES)} split fractions, got {len(fractions)}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {tuple(fractions)}")

    per_identity: dict[str, list[str]] = {}
    for ident_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        images = sorted(
            str(p.relative_to(root)) for p in ident_dir.iterdir()
            if p.suffix.lower() in IMAGE_SUFFIXES
        )
        if not images:
            log.warning("identity %s has zero images, skipped", ident_dir.name)
            continue
        per_identity[ident_dir.name] = images

    identities = sorted(per_identity)
    if len(identities) < 4:
        raise ConfigError(
            f"need at least 4 identities to form all splits, found {len(identities)}"
        )

    rng = random.Random(seed)
    rng.shuffle(identities)
    n = len(identities)
    cuts = [round(sum(fractions[: k + 1]) * n) for k in range(len(fractions))]
    manifests: dict[str, DatasetManifest] = {}
    start = 0
    for name, stop in zip(SPLIT_NAMES, cuts):
        chosen = sorted(identities[start:stop])
        entries = [(ident, rel) for ident in chosen for rel in per_identity[ident]]
        manifests[name] = DatasetManifest(root=root, split=name, entries=entries)
        start = stop
    return manifests


def load_image(path: str | Path) -> np.ndarray:
    """Decode an image file to an RGB uint8 array; non-RGB modes are converted."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise IOError(f"cannot decode image {path}: {exc}") from exc


def preprocess(raw_image: np.ndarray, image_size: int,
               identity: str = "", source_id: str = "") -> FaceImage:
    """Bilinear-resize to image_size^2 and scale intensities into [0, 1]."""
    arr = np.asarray(raw_image)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    if arr.ndim != 3 or arr.shape[2] not in (3, 4):
        raise ValueError(f"expected an RGB(A) or grayscale image, got shape {arr.shape}")
    if arr.shape[2] == 4:
        arr = arr[:, :, :3]
    if min(arr.shape[:2]) < 8:
        raise ValueError(f"image too small to be a face crop: {arr.shape[:2]}")
    if arr.dtype != np.uint8:
        arr = np.clip(arr, 0, 255).astype(np.uint8)
    im = Image.fromarray(arr)
    if im.size != (image_size, image_size):
        im = im.resize((image_size, image_size), Image.BILINEAR)
    pixels = np.asarray(im, dtype=np.float32) / 255.0
    return FaceImage(pixels=pixels, identity=identity, source_id=source_id)


def load_faces(manifest: DatasetManifest, image_size: int) -> list[FaceImage]:
    faces = []
    for ident, rel in manifest.entries:
        raw = load_image(manifest.root / rel)
        faces.append(preprocess(raw, image_size, identity=ident, source_id=rel))
    return faces


def build_pairs(manifest: DatasetManifest, num_pos: int, num_neg: int,
                seed: int) -> PairList:
    """Sample a balanced-ish pair protocol from one split, deterministic per seed."""
    by_identity: dict[str, list[str]] = {}
    for ident, rel in manifest.entries:
        by_identity.setdefault(ident, []).append(rel)
    multi = [i for i, imgs in by_identity.items() if len(imgs) >= 2]
    if len(multi) < 1 or len(by_identity) < 2:
        raise ConfigError("pair protocol needs >= 2 identities, one with >= 2 images")

    rng = random.Random(seed)
    pos: set[tuple[str, str]] = set()
    guard = 0
    while len(pos) < num_pos and guard < num_pos * 50:
        guard += 1
        ident = rng.choice(multi)
        a, b = rng.sample(by_identity[ident], 2)
        pos.add((min(a, b), max(a, b)))
    neg: set[tuple[str, str]] = set()
    idents = sorted(by_identity)
    guard = 0
    while len(neg) < num_neg and guard < num_neg * 50:
        guard += 1
        ia, ib = rng.sample(idents, 2)
        a = rng.choice(by_identity[ia])
        b = rng.choice(by_identity[ib])
        neg.add((min(a, b), max(a, b)))
    pairs = [(a, b, True) for a, b in sorted(pos)] + [(a, b, False) for a, b in sorted(neg)]
    return PairList(root=manifest.root, pairs=pairs)


def write_pair_file(pairs: PairList, path: str | Path) -> None:
    lines = [f"{a}\t{b}\t{int(same)}" for a, b, same in pairs.pairs]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pair_file(path: str | Path, root: str | Path) -> PairList:
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in ("0", "1"):
            raise ConfigError(f"{path}:{lineno}: expected 'path_a<TAB>path_b<TAB>0|1'")
        pairs.append((parts[0], parts[1], parts[2] == "1"))
    return PairList(root=Path(root), pairs=pairs)
