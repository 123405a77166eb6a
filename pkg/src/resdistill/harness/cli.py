"""Command-line entry point.

Subcommands share one output directory layout::

    OUT/data/            synthetic images + manifest.json   (gen-data)
    OUT/teacher/         teacher checkpoints and train log  (train)
    OUT/<mode>/          student checkpoints, reports       (train, evaluate)
    OUT/summary.{json,md}                                   (report)

Every subcommand is idempotent: rerunning with the same config and seed
rewrites identical files.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from ..model import load_checkpoint
from ..protocols.crossres import parse_resolution
from ..training import ValidationSet
from .config import MODES, ConfigError, ExperimentConfig, bundled_config, load_experiment_config
from .experiment import (
    DATA_DIR,
    PROTOCOLS,
    TEACHER_DIR,
    ExperimentFailed,
    evaluate_model,
    load_mode_model,
    prepare_dataset,
    run_experiment,
    summarize,
    train_student,
    train_teacher,
    write_bundle,
    write_pairs,
)
from .ingest import SplitRules, ingest

log = logging.getLogger("resdistill")


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _modes(text: str) -> tuple[str, ...]:
    modes = tuple(_csv_list(text))
    bad = [m for m in modes if m not in MODES]
    if bad or not modes:
        raise argparse.ArgumentTypeError(f"modes must be a comma list from {', '.join(MODES)}")
    return modes


def _resolutions(text: str) -> tuple:
    try:
        return tuple(parse_resolution(t) for t in _csv_list(text))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _config_path(value: str) -> Path:
    p = Path(value)
    if p.exists():
        return p
    return bundled_config(value)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None,
                        help="YAML experiment config, or the name of a bundled one (e.g. 'acceptance')")
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    common.add_argument("--out", type=Path, default=Path("runs/default"), help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="worker threads; 1 is the bit-exact reference path")
    common.add_argument("--mode", type=_modes, default=None, help="comma list from " + ", ".join(MODES))
    common.add_argument("--resolutions", type=_resolutions, default=None,
                        help="comma list of evaluation resolutions, e.g. 8,16,24,32,64,128,full")
    common.add_argument("--far", type=float, default=None, help="FAR target for TAR operating points")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="resdistill", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="render the synthetic dataset")
    sub.add_parser("train", parents=[common], help="pretrain the teacher and train student modes")
    ev = sub.add_parser("evaluate", parents=[common], help="run evaluation protocols for trained modes")
    ev.add_argument("--protocols", type=_csv_list, default=list(PROTOCOLS),
                    help="comma list from " + ", ".join(PROTOCOLS))
    sub.add_parser("crossres", parents=[common], help="cross-resolution TAR matrix for trained modes")
    sub.add_parser("report", parents=[common], help="assemble summary tables from existing bundles")
    sub.add_parser("run", parents=[common], help="gen-data, train, evaluate and report in one go")

    ing = sub.add_parser("ingest", help="build a manifest for a root/<identity>/<image> tree")
    ing.add_argument("root", type=Path)
    ing.add_argument("--gallery-fraction", type=float, default=0.5)
    ing.add_argument("--train-fraction", type=float, default=0.0)
    ing.add_argument("--val-fraction", type=float, default=0.0)
    ing.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_experiment_config(_config_path(args.config) if args.config else None)
    ev = {}
    if args.resolutions is not None:
        ev["resolutions"] = args.resolutions
    if args.far is not None:
        ev["far"] = args.far
    return cfg.with_overrides(seed=args.seed, modes=args.mode, eval=ev or None)


def _up_to_date(path: Path, train_cfg) -> bool:
    """True when ``path`` is a finished checkpoint written with ``train_cfg``."""
    if not path.exists():
        return False
    _, payload = load_checkpoint(path)
    return payload.get("config") == asdict(train_cfg) and payload.get("step") == train_cfg.total_steps


def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    data = prepare_dataset(cfg, args.out)
    write_pairs(args.out, data)
    print(f"{len(data.manifest.records)} images, {data.manifest.num_identities} identities -> {args.out / DATA_DIR}")
    return 0


def cmd_train(cfg: ExperimentConfig, args) -> int:
    data = prepare_dataset(cfg, args.out)
    val = ValidationSet(data.val)
    teacher_ckpt = args.out / TEACHER_DIR / "final.pt"
    if _up_to_date(teacher_ckpt, cfg.teacher):
        teacher = load_mode_model(args.out, "teacher-only")
        log.info("teacher checkpoint is up to date")
    else:
        teacher = train_teacher(cfg, data, args.out, val, args.jobs)
    for mode in cfg.modes:
        if mode == "teacher-only":
            continue
        if _up_to_date(args.out / mode / "final.pt", cfg.student_config(mode)):
            log.info("%s checkpoint is up to date", mode)
            continue
        train_student(cfg, mode, teacher, data, args.out, val, args.jobs)
    print(f"trained {', '.join(cfg.modes)} -> {args.out}")
    return 0


def _evaluate(cfg: ExperimentConfig, args, protocols) -> int:
    data = prepare_dataset(cfg, args.out)
    for mode in cfg.modes:
        model = load_mode_model(args.out, mode)
        results = evaluate_model(model, data, cfg.eval, protocols, args.jobs)
        write_bundle(args.out, mode, results)
        if "crossres" in results:
            print(f"## {mode}\n")
            print((args.out / mode / "crossres.md").read_text())
    return 0


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    unknown = [p for p in args.protocols if p not in PROTOCOLS]
    if unknown:
        raise ConfigError(f"unknown protocol(s): {', '.join(unknown)}")
    return _evaluate(cfg, args, args.protocols)


def cmd_crossres(cfg: ExperimentConfig, args) -> int:
    return _evaluate(cfg, args, ["crossres"])


def cmd_report(cfg: ExperimentConfig, args) -> int:
    summarize(args.out, cfg.modes)
    print((args.out / "summary.md").read_text())
    return 0


def cmd_run(cfg: ExperimentConfig, args) -> int:
    try:
        run_experiment(cfg, args.out, jobs=args.jobs)
    except ExperimentFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print((args.out / "summary.md").read_text())
    return 0


def cmd_ingest(args) -> int:
    rules = SplitRules(args.gallery_fraction, args.train_fraction, args.val_fraction)
    manifest = ingest(args.root, rules, write=True)
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "probe", "gallery")}
    print(f"{manifest.num_identities} identities, splits {counts}, checksum {manifest.checksum}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "crossres": cmd_crossres,
    "report": cmd_report,
    "run": cmd_run,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "ingest":
            return cmd_ingest(args)
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
