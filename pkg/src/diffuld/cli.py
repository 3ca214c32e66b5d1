"""Command-line entry point: ``diffuld <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import PROFILES, PipelineConfig

log = logging.getLogger("diffuld")

# flag -> config key; every flag is also reachable through --set
FLAG_KEYS = {
    "k": "k", "q": "q", "seed": "seed", "run_root": "run_root", "run_id": "run_id",
    "data_root": "data.root", "backbone": "backbone.name", "noise_sigma": "backbone.noise_sigma",
    "normalizer": "eval.normalizer",
}


def build_config(args) -> PipelineConfig:
    if args.config:
        cfg = PipelineConfig.load(args.config)
        if args.profile and args.profile != cfg.profile:
            log.warning("--profile %s ignored; the config file sets %s", args.profile, cfg.profile)
    else:
        cfg = PROFILES[args.profile or "desk"]()
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg = cfg.override(key, value)
    for item in args.set or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg = cfg.override(key.strip(), value.strip())
    return cfg


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file (keys mirror every flag)")
    p.add_argument("--profile", choices=sorted(PROFILES), help="base profile when no --config is given")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key, e.g. --set duld.total_iterations=500")
    p.add_argument("--k", type=int)
    p.add_argument("--q", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--run-root", dest="run_root", help="run root (env ULD_RUN_ROOT takes precedence)")
    p.add_argument("--run-id", dest="run_id")
    p.add_argument("--data-root", dest="data_root", help="dataset directory with annotations.jsonl")
    p.add_argument("--backbone")
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--normalizer", choices=["d_iod", "bbox_diagonal", "canvas_diagonal"])


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffuld", description="Unsupervised landmark discovery pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="render a synthetic blob-scene dataset to disk")
    p.add_argument("out", type=Path)
    p.add_argument("--n-train", type=int, default=60)
    p.add_argument("--n-test", type=int, default=20)
    p.add_argument("--landmarks", type=int, default=6)
    p.add_argument("--poses", default="bimodal_right",
                   choices=["frontal", "uniform", "bimodal", "bimodal_right"])
    p.add_argument("--side-range", type=float, nargs=2, default=(65.0, 85.0), metavar=("LO", "HI"),
                   help="|pose| range of the side mode for bimodal poses")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ingest", help="validate an annotation file and print a manifest summary")
    p.add_argument("root", type=Path)
    p.add_argument("--format", default="generic_json_lines", choices=["generic_json_lines", "synthetic"])

    for name, text in [("zeroshot", "cluster raw backbone descriptors"),
                       ("bootstrap", "self-supervised detector/descriptor initialisation"),
                       ("train-duld", "self-training with flat re-clustering"),
                       ("train-proxy", "train the heatmap VAE"),
                       ("train-duldpp", "self-training with two-stage re-clustering"),
                       ("eval", "re-evaluate the latest (or a given) finished stage")]:
        p = sub.add_parser(name, help=text)
        _common(p)
        if name == "eval":
            p.add_argument("--stage", choices=["bootstrap", "duld", "proxy", "duldpp"])
        if name == "train-duld":
            p.add_argument("--all", action="store_true", help="also run bootstrap first if missing")
        p.add_argument("--save-config", type=Path, help="write the resolved config as JSON and exit")

    p = sub.add_parser("plot", help="render PNG plots from a run directory's CSV/JSON files")
    p.add_argument("run_dir", type=Path)
    p.add_argument("--out", type=Path)
    return parser


STAGE_OF = {"bootstrap": "bootstrap", "train-duld": "duld", "train-proxy": "proxy",
            "train-duldpp": "duldpp"}


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    if args.command == "synth-data":
        from .data import generate_synthetic_dataset
        _, manifest = generate_synthetic_dataset(args.n_train, args.landmarks, args.poses,
                                                 seed=args.seed, n_test=args.n_test, root=args.out,
                                                 side_range=tuple(args.side_range))
        print(f"wrote {len(manifest)} images to {args.out}")
        return 0

    if args.command == "ingest":
        from .data import ManifestError, ingest_dataset
        try:
            manifest = ingest_dataset(args.root, args.format)
        except ManifestError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        print(f"{len(manifest)} entries, {manifest.n_landmarks} landmarks, "
              f"{len(manifest.missing)} missing images")
        return 0

    if args.command == "plot":
        from .plots import plot_run
        for path in plot_run(args.run_dir, args.out):
            print(path)
        return 0

    cfg = build_config(args)
    if args.save_config:
        args.save_config.write_text(cfg.to_json())
        print(args.save_config)
        return 0

    from .pipeline import MissingPrerequisite, run_dir, run_eval, run_stage, run_zeroshot, summarize
    try:
        if args.command == "zeroshot":
            _, report = run_zeroshot(cfg)
        elif args.command == "eval":
            report = run_eval(cfg, stage=args.stage)
        else:
            stage = STAGE_OF[args.command]
            if getattr(args, "all", False):
                run_stage("bootstrap", cfg)
            report = run_stage(stage, cfg)
    except MissingPrerequisite as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    print(summarize(report))
    print(f"run directory: {run_dir(cfg)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
