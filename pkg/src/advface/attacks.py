"""Attack simulation and metric aggregation over protected feature vaults.

Reconstruction attacks decode every stored feature and score the results
against the matching originals (SSIM/PSNR/MSE). Replay attacks feed each
reconstruction back through the extractor and check whether the verifier
accepts it as its true identity against a held-out genuine enrollment
feature (SRRA). The transfer grid crosses shadow and attacker architectures.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .metrics import mse, psnr, ssim
from .models import TrainedModel, images_to_tensor
from .recognizer import SplitRecognizer, VerificationThreshold, embed, extract_features
from .reconnet import reconstruct
from .vault import VaultRecord

log = logging.getLogger(__name__)


class ProvenanceError(RuntimeError):
    """Vault, attacker, or recognizer come from different extractor lineages."""


@dataclass
class EvalReport:
    """One (defense, attacker, dataset) cell of the benchmark tables."""

    dataset: str = ""
    defense: str = ""
    protection: dict = field(default_factory=dict)
    attacker_arch: str = ""
    shadow_arch: str = ""
    ssim: float | None = None
    psnr: float | None = None
    mse: float | None = None
    srra: float | None = None
    acc: float | None = None
    n: int = 0
    notes: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


REPORT_COLUMNS = ["dataset", "defense", "attacker_arch", "shadow_arch",
                  "ssim", "psnr", "mse", "srra", "acc", "n", "notes"]


def write_reports_csv(reports: list[EvalReport], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for rep in reports:
            row = rep.to_dict()
            for key in ("ssim", "psnr", "mse", "srra", "acc"):
                if row[key] is not None:
                    row[key] = f"{row[key]:.4f}"
            writer.writerow(row)


def write_reports_json(reports: list[EvalReport], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True))


def save_image_grid(rows: list[np.ndarray], path: str | Path, max_cols: int = 8) -> None:
    """Tile image rows (each (N, S, S, 3) in [0,1]) into one PNG artifact."""
    cols = min(max_cols, min(len(r) for r in rows))
    size = rows[0].shape[1]
    canvas = np.ones(((size + 2) * len(rows), (size + 2) * cols, 3), dtype=np.float32)
    for i, row in enumerate(rows):
        for j in range(cols):
            y, x = i * (size + 2) + 1, j * (size + 2) + 1
            canvas[y:y + size, x:x + size] = row[j]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((canvas * 255.0 + 0.5).astype(np.uint8)).save(path)


def check_provenance(records: list[VaultRecord], model: TrainedModel | None = None,
                     extractor_fingerprint: str | None = None) -> None:
    fps = {r.provenance.get("extractor_fingerprint") for r in records}
    fps.discard(None)
    if len(fps) > 1:
        raise ProvenanceError(f"vault mixes extractor lineages: {sorted(fps)}")
    want = extractor_fingerprint
    if model is not None:
        want = want or model.meta.get("extractor_fingerprint")
    if want and fps and want not in fps:
        raise ProvenanceError(
            f"vault extractor {sorted(fps)} does not match expected {want!r}")


def run_reconstruction_attack(attacker: TrainedModel, records: list[VaultRecord],
                              originals: dict[str, np.ndarray],
                              grid_path: str | Path | None = None,
                              dataset: str = "", defense: str = "",
                              shadow_arch: str = "") -> EvalReport:
    """Decode every vault feature and score against the matching originals."""
    report = EvalReport(dataset=dataset, defense=defense,
                        attacker_arch=attacker.kind, shadow_arch=shadow_arch)
    if not records:
        report.notes = "empty vault: metrics undefined"
        return report
    check_provenance(records, attacker)
    missing = [r.record_id for r in records if r.record_id not in originals]
    if missing:
        raise KeyError(f"no originals for records: {missing[:5]}")

    feats = np.stack([r.feature for r in records])
    recon = reconstruct(attacker, feats)
    scores = {"ssim": [], "psnr": [], "mse": []}
    for img, rec in zip(recon, (originals[r.record_id] for r in records)):
        scores["ssim"].append(ssim(rec, img))
        scores["psnr"].append(psnr(rec, img))
        scores["mse"].append(mse(rec, img))
    report.ssim = float(np.mean(scores["ssim"]))
    report.psnr = float(np.mean(scores["psnr"]))
    report.mse = float(np.mean(scores["mse"]))
    report.n = len(records)
    if len(records) and report.protection == {}:
        report.protection = dict(records[0].protection)
    if grid_path is not None:
        origs = np.stack([originals[r.record_id] for r in records])
        save_image_grid([origs, recon], grid_path)
    return report


def run_replay_attack(attacker: TrainedModel, recognizer: SplitRecognizer,
                      threshold: VerificationThreshold, records: list[VaultRecord],
                      enrollment: dict[str, np.ndarray]) -> dict:
    """Reconstruct, re-extract, and verify each record against its identity.

    enrollment maps identity -> one genuine feature (C, H, W) held out of the
    vault. Returns the acceptance fraction plus bookkeeping counts.
    """
    check_provenance(records, attacker,
                     extractor_fingerprint=recognizer.extractor_fingerprint())
    usable = [r for r in records if r.identity in enrollment]
    skipped = len(records) - len(usable)
    if skipped:
        log.warning("replay attack: %d records skipped (no enrollment feature)", skipped)
    if not usable:
        return {"srra": None, "accepted": 0, "total": 0, "skipped": skipped}

    feats = np.stack([r.feature for r in usable])
    recon = reconstruct(attacker, feats)
    refeats = extract_features(recognizer, images_to_tensor(recon))
    probe = embed(recognizer, refeats)
    idents = sorted({r.identity for r in usable})
    enroll = embed(recognizer, np.stack([enrollment[i] for i in idents]))
    enroll_of = {ident: enroll[i] for i, ident in enumerate(idents)}
    accepted = 0
    for k, rec in enumerate(usable):
        dist = float(np.sum((probe[k] - enroll_of[rec.identity]) ** 2))
        accepted += int(dist <= threshold.value)
    return {"srra": accepted / len(usable), "accepted": accepted,
            "total": len(usable), "skipped": skipped}


def run_transfer_grid(shadow_vaults: dict[str, list[VaultRecord]],
                      attackers: dict[str, TrainedModel],
                      originals: dict[str, np.ndarray],
                      dataset: str = "") -> tuple[dict, list[str]]:
    """Cross every shadow-protected vault with every attacker architecture.

    Returns ({(shadow_kind, attacker_kind): EvalReport | None}, gaps); a
    missing model leaves an explicit None cell and an entry in gaps.
    """
    kinds = sorted(set(shadow_vaults) | set(attackers))
    grid: dict[tuple[str, str], EvalReport | None] = {}
    gaps: list[str] = []
    for s_kind in kinds:
        for a_kind in kinds:
            if s_kind not in shadow_vaults:
                grid[(s_kind, a_kind)] = None
                gaps.append(f"no vault protected with shadow {s_kind!r}")
                continue
            if a_kind not in attackers:
                grid[(s_kind, a_kind)] = None
                gaps.append(f"no attacker of kind {a_kind!r}")
                continue
            grid[(s_kind, a_kind)] = run_reconstruction_attack(
                attackers[a_kind], shadow_vaults[s_kind], originals,
                dataset=dataset, defense="advface", shadow_arch=s_kind)
    return grid, sorted(set(gaps))


def grid_to_reports(grid: dict) -> list[EvalReport]:
    return [rep for rep in grid.values() if rep is not None]


def psnr_from_mse(mse_value: float, max_value: float = 1.0) -> float:
    """Consistency helper mirroring the psnr() clamp."""
    m = max(mse_value, 1e-10)
    return 10.0 * math.log10(max_value**2 / m)
