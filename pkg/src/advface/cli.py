"""Command-line entry point for the experiment harness.

Verbs: make-data, train-recognizer, train-attacker, train-shadow, protect,
evaluate, offline-retrain, sweep-epsilon, transfer-grid, report. Exit code 0
on success; failures print a machine-readable JSON error record to stderr and
exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import DEFENSES, RECON_KINDS, ConfigError, ExperimentConfig, load_config


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="YAML experiment config")
    parser.add_argument("--seed", type=int, default=None, help="override master seed")
    parser.add_argument("--out", type=Path, default=None, help="override output directory")
    parser.add_argument("--data-root", type=Path, default=None, help="override dataset root")
    parser.add_argument("--force", action="store_true", help="retrain/rewrite existing artifacts")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advface",
        description="Train a split face recognizer, protect its stored features "
                    "against inversion attacks, and benchmark privacy vs utility.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("make-data", help="generate the synthetic desk-scale face dataset")
    _common(p)
    p.add_argument("--identities", type=int, default=100)
    p.add_argument("--images-per-identity", type=int, default=10)

    for verb in ("train-recognizer", "offline-retrain", "sweep-epsilon",
                 "transfer-grid", "report"):
        p = sub.add_parser(verb)
        _common(p)
        if verb == "sweep-epsilon":
            p.add_argument("--epsilons", type=float, nargs="+", default=None)

    for verb in ("train-attacker", "train-shadow"):
        p = sub.add_parser(verb)
        _common(p)
        p.add_argument("--arch", choices=RECON_KINDS, default=None,
                       help="defaults to the config's recon arch")

    p = sub.add_parser("protect", help="write one protected feature vault")
    _common(p)
    p.add_argument("--defense", choices=DEFENSES, required=True)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--shadow-arch", choices=RECON_KINDS, default=None)

    p = sub.add_parser("evaluate", help="attack vaults and tabulate metrics")
    _common(p)
    p.add_argument("--vaults", type=Path, nargs="+", default=None,
                   help="vault directories (default: every vault in the run)")
    p.add_argument("--attackers", choices=RECON_KINDS, nargs="+", default=None)
    p.add_argument("--no-acc", action="store_true", help="skip pair-accuracy columns")
    return parser


def _load(args) -> ExperimentConfig:
    if args.config is not None:
        cfg = load_config(args.config)
    else:
        cfg = ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = str(args.out)
    if getattr(args, "data_root", None) is not None:
        cfg.data.root = str(args.data_root)
    cfg.validate()
    return cfg


def run(args) -> int:
    from . import harness as hz

    if args.verb == "make-data":
        from .synthetic import generate_dataset
        cfg = _load(args)
        root = generate_dataset(cfg.data.root, args.identities, args.images_per_identity,
                                cfg.data.image_size, cfg.seed)
        print(f"dataset written to {root}")
        return 0

    cfg = _load(args)
    h = hz.Harness(cfg)
    if args.verb == "train-recognizer":
        rec = h.ensure_recognizer(force=args.force)
        print(f"recognizer ready: feature shape {rec.feature_shape}, "
              f"classes {len(rec.classes)}, checkpoint {h.recognizer_path()}")
    elif args.verb in ("train-attacker", "train-shadow"):
        role = "attacker" if args.verb == "train-attacker" else "shadow"
        arch = args.arch or cfg.recon.arch
        model = h.ensure_recon(role, arch, force=args.force)
        print(f"{role} {arch} ready: {h.recon_path(role, arch)}")
    elif args.verb == "protect":
        vault = h.cmd_protect(args.defense, epsilon=args.epsilon,
                              shadow_arch=args.shadow_arch, force=args.force)
        print(f"vault written: {vault}")
    elif args.verb == "evaluate":
        vaults = args.vaults or sorted((h.out / "vaults").glob("*"))
        if not vaults:
            raise ConfigError("no vaults to evaluate; run `protect` first")
        attackers = args.attackers or [cfg.recon.arch]
        reports = h.cmd_evaluate([Path(v) for v in vaults], attackers,
                                 with_acc=not args.no_acc)
        for rep in reports:
            print(json.dumps(rep.to_dict(), sort_keys=True))
        print(f"reports: {h.out / 'reports' / 'evaluation.csv'}")
    elif args.verb == "offline-retrain":
        report = h.cmd_offline_retrain(force=args.force)
        print(json.dumps(report, indent=2, sort_keys=True))
    elif args.verb == "sweep-epsilon":
        rows = h.cmd_sweep_epsilon(args.epsilons)
        for row in rows:
            print(json.dumps(row, sort_keys=True))
    elif args.verb == "transfer-grid":
        rows = h.cmd_transfer_grid()
        for row in rows:
            print(json.dumps(row, sort_keys=True))
    elif args.verb == "report":
        path = h.cmd_report()
        print(f"summary: {path}")
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except (ConfigError, FileNotFoundError, ValueError, RuntimeError) as exc:
        record = {"error": type(exc).__name__, "message": str(exc), "verb": args.verb}
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
