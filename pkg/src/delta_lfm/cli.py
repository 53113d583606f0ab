"""delta-lfm command line.

Exit codes: 0 success, 1 invalid input or configuration (including a diverged
training run), 2 file-system or artifact-format problems.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from .latent import TrainingDivergedError
from . import pipeline

log = logging.getLogger("delta_lfm")

COMMANDS = ("gen-data", "train-ae", "train-flow", "predict", "evaluate", "export-latents", "sensitivity", "ablate")


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from e


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment JSON (defaults are used when omitted)")
    common.add_argument("--seed", type=int, help="training seed for both the autoencoder and the flow")
    common.add_argument("--out", type=Path, help="run directory (overrides out_dir)")
    common.add_argument("--no-arc", action="store_true", help="drop the angular (Arc) term")
    common.add_argument("--no-rank", action="store_true", help="drop the magnitude ranking term")
    common.add_argument("--cosine", action="store_true", help="cosine surrogate instead of Arc")
    common.add_argument("--simple-rank", action="store_true", help="simple hinge instead of Rank+Pull")
    common.add_argument("--fm-sampling", choices=("temporal", "physical"), help="flow time over [0,T] or [0,1]")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="delta-lfm", description="Latent flow matching for longitudinal scans.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "predict":
            sp.add_argument("--patient", type=int, required=True)
            sp.add_argument("--visit", type=int, default=0, help="source visit index")
            sp.add_argument("--targets", type=_float_list, help="comma-separated target ages; default is a trajectory")
        elif name == "evaluate":
            sp.add_argument("--split", default="test", choices=("train", "val", "test"))
            sp.add_argument("--copy-baseline", action="store_true", help="score the source scan as the prediction")
        elif name == "ablate":
            sp.add_argument("--variants", help=f"comma-separated subset of {','.join(pipeline.ABLATIONS)}")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.no_arc and args.cosine:
        raise ConfigError("--no-arc and --cosine are mutually exclusive")
    if args.no_rank and args.simple_rank:
        raise ConfigError("--no-rank and --simple-rank are mutually exclusive")
    if args.no_arc:
        changes["ae.arcrank.angular"] = "none"
    if args.cosine:
        changes["ae.arcrank.angular"] = "cosine"
    if args.no_rank:
        changes["ae.arcrank.ranking"] = "none"
    if args.simple_rank:
        changes["ae.arcrank.ranking"] = "simple"
    if args.fm_sampling:
        changes["flow.sampling_mode"] = {"temporal": "temporal_0T", "physical": "physical_01"}[args.fm_sampling]
    if args.out is not None:
        changes["out_dir"] = str(args.out)
    cfg = pipeline.override(cfg, changes) if changes else cfg
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def run(args) -> None:
    cfg = resolve_config(args)
    paths = pipeline.RunPaths(Path(cfg.out_dir))
    cmd = args.command
    if cmd == "gen-data":
        pipeline.gen_data(cfg, paths)
    elif cmd == "train-ae":
        pipeline.train_ae(cfg, paths)
    elif cmd == "train-flow":
        pipeline.train_flow_stage(cfg, paths)
    elif cmd == "predict":
        files = pipeline.predict(cfg, paths, args.patient, args.visit, args.targets)
        log.info("wrote %d files under %s", len(files), paths.predict)
    elif cmd == "evaluate":
        pipeline.evaluate(cfg, paths, args.split, args.copy_baseline)
    elif cmd == "export-latents":
        pipeline.export_latents(cfg, paths)
    elif cmd == "sensitivity":
        pipeline.sensitivity(cfg, paths)
    elif cmd == "ablate":
        variants = args.variants.split(",") if args.variants else None
        pipeline.ablate(cfg, paths, variants)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        run(args)
    except (ConfigError, ValueError, TrainingDivergedError) as e:
        log.error("%s", e)
        return 1
    except OSError as e:
        log.error("%s", e)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
