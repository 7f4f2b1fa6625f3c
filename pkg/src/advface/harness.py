"""End-to-end experiment orchestration behind the CLI verbs.

One experiment directory (config.out_dir) holds checkpoints, vaults, reports,
and a run manifest tracing every artifact back to the config hash. Stages are
idempotent: an existing checkpoint or vault is reused unless force=True.
Every stage derives its RNG seed from the master seed by labeled hashing, so
stages rerun independently and a full rerun reproduces every report value.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import attacks, protect
from .config import (
    DEFENSES,
    RECON_KINDS,
    ConfigError,
    ExperimentConfig,
    ProtectionConfig,
    config_hash,
    stage_seed,
)
from .data import (
    DatasetManifest,
    build_pairs,
    load_dataset,
    load_faces,
    read_pair_file,
    write_pair_file,
)
from .models import TrainedModel, images_to_tensor
from .recognizer import (
    SplitRecognizer,
    calibrate_from_distances,
    embed,
    extract_features,
    load_recognizer,
    offline_retrain_tail,
    pair_distances,
    save_recognizer,
    train_recognizer,
)
from .reconnet import build_recon, load_recon, save_recon, train_recon
from .vault import VaultRecord, vault_load_all, vault_store

log = logging.getLogger(__name__)


@dataclass
class EvalAssets:
    """Everything the attack/verification protocols need from the eval split."""

    manifest: DatasetManifest
    originals: dict[str, np.ndarray]        # record_id -> (S, S, 3) pixels (vault subset)
    vault_entries: list[tuple[str, str, str]]  # (record_id, identity, rel path)
    raw_features: np.ndarray                # features of the vault subset, manifest order
    enrollment: dict[str, np.ndarray]       # identity -> one held-out genuine feature
    pairs: "object"


class Harness:
    def __init__(self, cfg: ExperimentConfig):
        cfg.validate()
        if not Path(cfg.data.root).is_dir():
            raise ConfigError(f"dataset root {cfg.data.root} does not exist")
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self._manifest_path = self.out / "run_manifest.json"
        self._recognizer: SplitRecognizer | None = None
        self._recons: dict[tuple[str, str], TrainedModel] = {}
        self._assets: EvalAssets | None = None
        self._splits: dict[str, DatasetManifest] | None = None

    # ---- run manifest -----------------------------------------------------

    def _manifest(self) -> dict:
        if self._manifest_path.is_file():
            return json.loads(self._manifest_path.read_text())
        return {"config_hash": config_hash(self.cfg), "stages": {}}

    def _record_stage(self, name: str, seconds: float, artifacts: list[str]) -> None:
        manifest = self._manifest()
        manifest["config_hash"] = config_hash(self.cfg)
        manifest["stages"][name] = {
            "seconds": round(seconds, 3),
            "artifacts": artifacts,
        }
        for art in artifacts:
            if not Path(art).exists():
                raise RuntimeError(f"stage {name}: artifact {art} missing at finalize")
        self._manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))

    # ---- datasets ----------------------------------------------------------

    def splits(self) -> dict[str, DatasetManifest]:
        if self._splits is None:
            self._splits = load_dataset(
                self.cfg.data.root, self.cfg.data.fractions,
                stage_seed(self.cfg.seed, "split"))
        return self._splits

    @property
    def dataset_name(self) -> str:
        return Path(self.cfg.data.root).name

    # ---- model stages -------------------------------------------------------

    def recognizer_path(self) -> Path:
        return self.out / "checkpoints" / "recognizer.pt"

    def ensure_recognizer(self, force: bool = False) -> SplitRecognizer:
        path = self.recognizer_path()
        if self._recognizer is not None and not force:
            return self._recognizer
        if path.is_file() and not force:
            self._recognizer = load_recognizer(path)
            return self._recognizer
        t0 = time.monotonic()
        rec = train_recognizer(
            self.splits()["recognizer_train"], self.cfg.recognizer,
            self.cfg.data.image_size, stage_seed(self.cfg.seed, "recognizer"))
        save_recognizer(rec, path)
        self._record_stage("train-recognizer", time.monotonic() - t0, [str(path)])
        self._recognizer = rec
        return rec

    def recon_path(self, role: str, arch: str) -> Path:
        return self.out / "checkpoints" / f"{role}_{arch}.pt"

    def ensure_recon(self, role: str, arch: str, force: bool = False) -> TrainedModel:
        """role: 'attacker' (attacker_train split) or 'shadow' (shadow_train split)."""
        if role not in ("attacker", "shadow"):
            raise ConfigError(f"recon role must be attacker|shadow, got {role!r}")
        if arch not in RECON_KINDS:
            raise ConfigError(f"unknown recon arch {arch!r}")
        key = (role, arch)
        if key in self._recons and not force:
            return self._recons[key]
        path = self.recon_path(role, arch)
        if path.is_file() and not force:
            self._recons[key] = load_recon(path)
            return self._recons[key]
        recognizer = self.ensure_recognizer()
        split = "attacker_train" if role == "attacker" else "shadow_train"
        seed = stage_seed(self.cfg.seed, f"recon:{role}:{arch}")
        t0 = time.monotonic()
        model = build_recon(arch, recognizer.feature_shape, self.cfg.data.image_size,
                            self.cfg.recon.width, seed=seed)
        model, train_log = train_recon(
            model, self.splits()[split], recognizer.extractor,
            epochs=self.cfg.recon.epochs, lr=self.cfg.recon.lr,
            batch_size=self.cfg.recon.batch_size, seed=seed, role=role,
            holdout_fraction=self.cfg.recon.holdout_fraction,
            image_size=self.cfg.data.image_size)
        save_recon(model, train_log, path)
        model = load_recon(path)   # in-memory handle mirrors the checkpoint meta
        self._record_stage(f"train-{role}-{arch}", time.monotonic() - t0, [str(path)])
        self._recons[key] = model
        return self._recons[key]

    # ---- eval assets --------------------------------------------------------

    def eval_assets(self) -> EvalAssets:
        if self._assets is not None:
            return self._assets
        cfg = self.cfg
        recognizer = self.ensure_recognizer()
        manifest = self.splits()["eval"]
        if manifest.n == 0:
            raise ConfigError("eval split is empty; adjust fractions")
        by_identity: dict[str, list[str]] = {}
        for ident, rel in manifest.entries:
            by_identity.setdefault(ident, []).append(rel)

        n_enroll = cfg.eval.srra_enroll_per_identity
        enroll_rel: dict[str, str] = {}
        vault_entries: list[tuple[str, str, str]] = []
        for ident in sorted(by_identity):
            rels = sorted(by_identity[ident])
            held = rels[:n_enroll]
            if held:
                enroll_rel[ident] = held[0]
            for rel in rels[n_enroll:]:
                vault_entries.append((rel, ident, rel))

        faces = {rel: face for (ident, rel), face in
                 zip(manifest.entries, load_faces(manifest, cfg.data.image_size))}
        vault_images = [faces[rel] for _, _, rel in vault_entries]
        raw_features = extract_features(recognizer, vault_images)
        originals = {rid: faces[rel].pixels for rid, _, rel in vault_entries}

        enrollment: dict[str, np.ndarray] = {}
        if enroll_rel:
            idents = sorted(enroll_rel)
            feats = extract_features(recognizer, [faces[enroll_rel[i]] for i in idents])
            enrollment = {ident: feats[k] for k, ident in enumerate(idents)}
        if cfg.eval.srra_same_image:
            # enroll the first vaulted image of each identity itself
            enrollment = {}
            for k, (_, ident, _) in enumerate(vault_entries):
                enrollment.setdefault(ident, raw_features[k])

        if cfg.data.pair_file:
            pairs = read_pair_file(cfg.data.pair_file, manifest.root)
        else:
            pairs = build_pairs(manifest, cfg.data.num_pos_pairs, cfg.data.num_neg_pairs,
                                stage_seed(cfg.seed, "pairs"))
            pair_path = self.out / "pairs.tsv"
            write_pair_file(pairs, pair_path)
        self._assets = EvalAssets(
            manifest=manifest, originals=originals, vault_entries=vault_entries,
            raw_features=raw_features, enrollment=enrollment, pairs=pairs)
        return self._assets

    # ---- protection ---------------------------------------------------------

    def _protection_for(self, defense: str, epsilon: float | None) -> ProtectionConfig:
        prot = dataclasses.replace(self.cfg.protection)
        if epsilon is not None:
            prot.epsilon = epsilon
        prot.validate()
        return prot

    def vault_dir(self, defense: str, epsilon: float | None = None,
                  shadow_arch: str | None = None) -> Path:
        arch = shadow_arch or self.cfg.recon.arch
        name = defense if defense != "advface" else f"advface_{arch}"
        if epsilon is not None:
            name += f"_eps{epsilon:g}"
        return self.out / "vaults" / name

    def feature_fn(self, defense: str, prot: ProtectionConfig, shadow_arch: str | None = None):
        """Raw feature array -> protected feature array, for pair protocols."""
        recognizer = self.ensure_recognizer()
        shadow = self.ensure_recon("shadow", shadow_arch or self.cfg.recon.arch)
        seed = stage_seed(self.cfg.seed, f"protect:{defense}")

        def fn(feats: np.ndarray) -> np.ndarray:
            z = torch.as_tensor(np.asarray(feats, dtype=np.float32))
            out = protect.protect_features(defense, shadow, recognizer.extractor.module,
                                           z, prot, seed)
            return out.numpy().astype(np.float32)

        return fn

    def cmd_protect(self, defense: str, epsilon: float | None = None,
                    shadow_arch: str | None = None, force: bool = False) -> Path:
        if defense not in DEFENSES:
            raise ConfigError(f"defense must be one of {DEFENSES}, got {defense!r}")
        vault = self.vault_dir(defense, epsilon, shadow_arch)
        assets = self.eval_assets()
        if vault.is_dir() and not force:
            existing = list(vault.glob("*.advf"))
            if len(existing) == len(assets.vault_entries):
                return vault
        recognizer = self.ensure_recognizer()
        arch = shadow_arch or self.cfg.recon.arch
        shadow = self.ensure_recon("shadow", arch)
        prot = self._protection_for(defense, epsilon)
        seed = stage_seed(self.cfg.seed, f"protect:{defense}")

        t0 = time.monotonic()
        z = torch.as_tensor(assets.raw_features)
        protected = protect.protect_features(defense, shadow, recognizer.extractor.module,
                                             z, prot, seed).numpy().astype(np.float32)
        provenance = {
            "extractor_fingerprint": recognizer.extractor_fingerprint(),
            "shadow_fingerprint": shadow.fingerprint(),
            "shadow_arch": arch,
            "defense": defense,
            "seed": seed,
            "batch_partition": {"batch_size": prot.batch_size, "order": "manifest"},
        }
        snapshot = dataclasses.asdict(prot)
        for k, (rid, ident, _) in enumerate(assets.vault_entries):
            vault_store(VaultRecord(record_id=rid, identity=ident, feature=protected[k],
                                    protection=snapshot, provenance=provenance), vault)
        self._record_stage(f"protect-{vault.name}", time.monotonic() - t0, [str(vault)])
        return vault

    # ---- verification protocols ----------------------------------------------

    def system_threshold(self):
        """Deployment calibration: k-fold threshold on raw (unprotected) features."""
        recognizer = self.ensure_recognizer()
        assets = self.eval_assets()
        dists, labels = pair_distances(recognizer, assets.pairs)
        return calibrate_from_distances(dists, labels, self.cfg.eval.folds)

    def protected_pair_acc(self, defense: str, prot: ProtectionConfig,
                           shadow_arch: str | None = None,
                           recognizer: SplitRecognizer | None = None) -> float:
        """Mean held-out verification accuracy with pair features protected."""
        recognizer = recognizer or self.ensure_recognizer()
        assets = self.eval_assets()
        fn = self.feature_fn(defense, prot, shadow_arch)
        if self.cfg.eval.protect_both_pair_sides:
            dists, labels = pair_distances(recognizer, assets.pairs, feature_fn=fn)
        else:
            dists, labels = self._one_sided_distances(recognizer, assets.pairs, fn)
        return calibrate_from_distances(dists, labels, self.cfg.eval.folds).accuracy

    def _one_sided_distances(self, recognizer: SplitRecognizer, pairs, feature_fn):
        from .data import load_image, preprocess
        rels = sorted({p for a, b, _ in pairs.pairs for p in (a, b)})
        images = [preprocess(load_image(pairs.root / rel), recognizer.image_size)
                  for rel in rels]
        feats = extract_features(recognizer, images)
        emb_raw = embed(recognizer, feats)
        emb_prot = embed(recognizer, feature_fn(feats))
        of = {rel: k for k, rel in enumerate(rels)}
        dists = np.array([np.sum((emb_prot[of[a]] - emb_raw[of[b]]) ** 2)
                          for a, b, _ in pairs.pairs])
        labels = np.array([same for _, _, same in pairs.pairs], dtype=bool)
        return dists, labels

    # ---- evaluation ----------------------------------------------------------

    def cmd_evaluate(self, vault_dirs: list[Path], attacker_archs: list[str],
                     with_acc: bool = True, grids: bool = True) -> list[attacks.EvalReport]:
        recognizer = self.ensure_recognizer()
        assets = self.eval_assets()
        threshold = self.system_threshold()
        reports: list[attacks.EvalReport] = []
        t0 = time.monotonic()
        acc_cache: dict[tuple[str, str, float], float] = {}
        for vault in vault_dirs:
            records = vault_load_all(vault)
            if records:
                prot_snapshot = records[0].protection
                defense = records[0].provenance.get("defense", vault.name)
                shadow_arch = records[0].provenance.get("shadow_arch", "")
            else:
                prot_snapshot, defense, shadow_arch = {}, Path(vault).name, ""
            for arch in attacker_archs:
                attacker = self.ensure_recon("attacker", arch)
                grid_path = (self.out / "reports" / f"grid_{Path(vault).name}_{arch}.png"
                             if grids and records else None)
                rep = attacks.run_reconstruction_attack(
                    attacker, records, assets.originals, grid_path=grid_path,
                    dataset=self.dataset_name, defense=defense, shadow_arch=shadow_arch)
                rep.protection = dict(prot_snapshot)
                if records:
                    replay = attacks.run_replay_attack(attacker, recognizer, threshold,
                                                       records, assets.enrollment)
                    rep.srra = replay["srra"]
                if with_acc and records:
                    key = (defense, shadow_arch, float(prot_snapshot.get("epsilon", -1.0)))
                    if key not in acc_cache:
                        prot = ProtectionConfig(**prot_snapshot) if prot_snapshot \
                            else self.cfg.protection
                        acc_cache[key] = self.protected_pair_acc(
                            defense, prot, shadow_arch or None)
                    rep.acc = acc_cache[key]
                reports.append(rep)
        report_dir = self.out / "reports"
        attacks.write_reports_csv(reports, report_dir / "evaluation.csv")
        attacks.write_reports_json(reports, report_dir / "evaluation.json")
        self._record_stage("evaluate", time.monotonic() - t0,
                           [str(report_dir / "evaluation.csv")])
        return reports

    # ---- offline retraining ----------------------------------------------------

    def cmd_offline_retrain(self, force: bool = False) -> dict:
        """Retrain the server tail on an adversarial database; report ACC before/after."""
        cfg = self.cfg
        recognizer = self.ensure_recognizer()
        shadow = self.ensure_recon("shadow", cfg.recon.arch)
        split = self.splits()["recognizer_train"]
        if split.n == 0:
            raise ConfigError("recognizer_train split is empty; nothing to retrain on")
        t0 = time.monotonic()
        faces = load_faces(split, cfg.data.image_size)
        feats = extract_features(recognizer, faces)
        adv = protect.protect_features(
            "advface", shadow, recognizer.extractor.module,
            torch.as_tensor(feats), cfg.protection,
            stage_seed(cfg.seed, "protect:advface")).numpy()
        idents = [f.identity for f in faces]

        before = self.protected_pair_acc("advface", cfg.protection)
        baseline = self.protected_pair_acc("none", cfg.protection)
        retrained = offline_retrain_tail(
            recognizer, adv, idents, epochs=cfg.eval.offline_epochs,
            lr=cfg.eval.offline_lr, seed=stage_seed(cfg.seed, "offline"),
            triplet_margin=cfg.recognizer.triplet_margin)
        after = self.protected_pair_acc("advface", cfg.protection, recognizer=retrained)

        path = self.out / "checkpoints" / "recognizer_offline.pt"
        save_recognizer(retrained, path)
        report = {
            "acc_unprotected": baseline,
            "acc_online": before,
            "acc_offline": after,
            "extractor_unchanged":
                recognizer.extractor_fingerprint() == retrained.extractor_fingerprint(),
        }
        report_path = self.out / "reports" / "offline_retrain.json"
        report_path.parent.mkdir(parents=True, exist_ok=True)
        report_path.write_text(json.dumps(report, indent=2, sort_keys=True))
        self._record_stage("offline-retrain", time.monotonic() - t0,
                           [str(path), str(report_path)])
        return report

    # ---- sweeps -----------------------------------------------------------------

    def cmd_sweep_epsilon(self, epsilons: list[float] | None = None) -> list[dict]:
        cfg = self.cfg
        epsilons = epsilons if epsilons is not None else [round(0.05 * k, 2) for k in range(7)]
        attacker = self.ensure_recon("attacker", cfg.recon.arch)
        recognizer = self.ensure_recognizer()
        assets = self.eval_assets()
        threshold = self.system_threshold()
        t0 = time.monotonic()
        rows = []
        for eps in epsilons:
            vault = self.cmd_protect("advface", epsilon=eps)
            records = vault_load_all(vault)
            rep = attacks.run_reconstruction_attack(
                attacker, records, assets.originals,
                dataset=self.dataset_name, defense="advface")
            replay = attacks.run_replay_attack(attacker, recognizer, threshold,
                                               records, assets.enrollment)
            prot = self._protection_for("advface", eps)
            acc = self.protected_pair_acc("advface", prot)
            rows.append({"epsilon": eps, "ssim": rep.ssim, "psnr": rep.psnr,
                         "mse": rep.mse, "srra": replay["srra"], "acc": acc})
        path = self.out / "reports" / "epsilon_sweep.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epsilon", "ssim", "psnr", "mse",
                                                    "srra", "acc"])
            writer.writeheader()
            for row in rows:
                writer.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v)
                                 for k, v in row.items()})
        self._record_stage("sweep-epsilon", time.monotonic() - t0, [str(path)])
        return rows

    def cmd_transfer_grid(self) -> list[dict]:
        """3x3 shadow-architecture x attacker-architecture reconstruction grid."""
        assets = self.eval_assets()
        t0 = time.monotonic()
        shadow_vaults = {}
        for arch in RECON_KINDS:
            self.ensure_recon("shadow", arch)
            shadow_vaults[arch] = vault_load_all(self.cmd_protect("advface", shadow_arch=arch))
        attackers = {arch: self.ensure_recon("attacker", arch) for arch in RECON_KINDS}
        grid, gaps = attacks.run_transfer_grid(shadow_vaults, attackers, assets.originals,
                                               dataset=self.dataset_name)
        if gaps:
            raise RuntimeError(f"transfer grid has gaps: {gaps}")
        rows = []
        for (s_kind, a_kind), rep in sorted(grid.items()):
            rows.append({"shadow": s_kind, "attacker": a_kind, "ssim": rep.ssim,
                         "psnr": rep.psnr, "mse": rep.mse, "n": rep.n})
        path = self.out / "reports" / "transfer_grid.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["shadow", "attacker", "ssim", "psnr",
                                                    "mse", "n"])
            writer.writeheader()
            for row in rows:
                writer.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v)
                                 for k, v in row.items()})
        self._record_stage("transfer-grid", time.monotonic() - t0, [str(path)])
        return rows

    # ---- consolidated report ------------------------------------------------------

    def cmd_report(self) -> Path:
        """Merge every per-stage report in this run into one CSV."""
        report_dir = self.out / "reports"
        report_dir.mkdir(parents=True, exist_ok=True)
        out_path = report_dir / "summary.csv"
        rows: list[dict] = []
        eval_json = report_dir / "evaluation.json"
        if eval_json.is_file():
            for rec in json.loads(eval_json.read_text()):
                rows.append({k: rec.get(k) for k in attacks.REPORT_COLUMNS})
        offline = report_dir / "offline_retrain.json"
        if offline.is_file():
            rep = json.loads(offline.read_text())
            rows.append({"dataset": self.dataset_name, "defense": "advface-offline",
                         "acc": rep["acc_offline"], "notes": "tail retrained"})
        with out_path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=attacks.REPORT_COLUMNS,
                                    extrasaction="ignore")
            writer.writeheader()
            for row in rows:
                writer.writerow(row)
        return out_path


def run_full_pipeline(cfg: ExperimentConfig, defenses: tuple[str, ...] = DEFENSES,
                      force: bool = False) -> dict:
    """Train everything, protect one vault per defense, evaluate, retrain offline.

    Returns {"reports": [EvalReport...], "offline": {...}} for programmatic use;
    artifacts land under cfg.out_dir.
    """
    h = Harness(cfg)
    h.ensure_recognizer(force=force)
    h.ensure_recon("shadow", cfg.recon.arch, force=force)
    h.ensure_recon("attacker", cfg.recon.arch, force=force)
    vaults = [h.cmd_protect(d, force=force) for d in defenses]
    reports = h.cmd_evaluate(vaults, [cfg.recon.arch])
    offline = h.cmd_offline_retrain(force=force)
    h.cmd_report()
    return {"reports": reports, "offline": offline, "harness": h}
