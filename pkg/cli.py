"""
Command-line entry point for the multimodal diffusion experiments.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""
from typing import Any, Dict, List, Optional
import argparse
import logging
import sys

from pydantic import BaseModel, ValidationError

from config import settings
from exceptions import ConfigError, MultimodalDiffusionError
from experiment_service import ExperimentService, apply_overrides, load_config

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmdiff",
        description="Multimodal diffusion priors and SMC inpainting for black-box inverse problems",
    )
    parser.add_argument("--config", help="Experiment config JSON (defaults apply when omitted)")
    parser.add_argument("--seed", type=int, help="Override the seed of the command (solver or training)")
    parser.add_argument("--out", help="Override the output directory")
    parser.add_argument("--log-level", default=settings.log_level, help="Logging level")
    parser.add_argument("--workers", type=int, default=None, help="Threads for data-parallel work")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="Generate training and validation joint fields")

    train = sub.add_parser("train", help="Train a denoiser")
    modality = train.add_mutually_exclusive_group(required=True)
    modality.add_argument("--unimodal", action="store_true", help="Train on the main modality only")
    modality.add_argument("--multimodal", action="store_true", help="Train on the joint fields")
    train.add_argument("--width", type=int, help="Hidden width override")

    sample = sub.add_parser("sample", help="Draw unconditional samples")
    sample.add_argument("--checkpoint", help="Checkpoint to sample from")
    sample.add_argument("--oracle", help="Name of an oracle mixture from the config")
    sample.add_argument("--n", type=int, default=16, help="Number of samples")

    recon = sub.add_parser("reconstruct", help="Reconstruct one validation field")
    recon.add_argument("--checkpoint", required=True)
    recon.add_argument("--fraction", type=float, required=True, help="Observed main-modality fraction")
    recon.add_argument("--sigma", type=float, default=0.0, help="Auxiliary noise std")
    recon.add_argument("--particles", type=int, help="Particle count override")

    sweep = sub.add_parser("sweep", help="Paired fraction x sigma sweep")
    sweep.add_argument("--multimodal-checkpoint", required=True)
    sweep.add_argument("--unimodal-checkpoint", action="append", required=True, help="Repeat for each width")
    sweep.add_argument("--fraction", type=float, action="append", help="Replace the configured fractions")
    sweep.add_argument("--sigma", type=float, action="append", help="Replace the configured sigmas")
    sweep.add_argument("--particles", type=int)

    consistency = sub.add_parser("consistency", help="Consistency of generated modalities")
    consistency.add_argument("--checkpoint", required=True)
    consistency.add_argument("--n", type=int, help="Number of samples")

    uncertainty = sub.add_parser("uncertainty", help="Error spread across posterior samples")
    uncertainty.add_argument("--checkpoint", required=True)
    uncertainty.add_argument("--fraction", type=float, action="append", help="Fractions to study")
    uncertainty.add_argument("--n-out", type=int, help="Posterior samples per observation")
    uncertainty.add_argument("--particles", type=int)

    evaluate = sub.add_parser("eval", help="Evaluate the acceptance rules")
    evaluate.add_argument("--dir", help="Output directory to evaluate (default: --out / config)")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {"output_dir": args.out}
    seed_key = "train.seed" if args.command == "train" else "solver.seed"
    overrides[seed_key] = args.seed
    overrides["solver.particles"] = getattr(args, "particles", None)
    if args.command == "sweep":
        overrides["sweep.fractions"] = args.fraction
        overrides["sweep.sigmas"] = args.sigma
    return overrides


def _emit(result: BaseModel) -> None:
    print(result.model_dump_json(indent=2))


def run(args: argparse.Namespace) -> int:
    config = apply_overrides(load_config(args.config), _overrides(args))
    service = ExperimentService(config, max_workers=args.workers)

    if args.command == "gen-data":
        _emit(service.gen_data())
    elif args.command == "train":
        _emit(service.train("unimodal" if args.unimodal else "multimodal", width=args.width))
    elif args.command == "sample":
        _emit(service.sample(args.checkpoint, args.n, oracle=args.oracle))
    elif args.command == "reconstruct":
        _emit(service.reconstruct(args.checkpoint, args.fraction, args.sigma, seed=config.solver.seed))
    elif args.command == "sweep":
        _emit(service.sweep(args.multimodal_checkpoint, args.unimodal_checkpoint))
    elif args.command == "consistency":
        result = service.consistency(args.checkpoint, n=args.n)
        _emit(result.model_copy(update={"errors": []}))
    elif args.command == "uncertainty":
        _emit(service.uncertainty(args.checkpoint, fractions=args.fraction, n_out=args.n_out))
    elif args.command == "eval":
        report = service.evaluate(args.dir)
        _emit(report)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    try:
        return run(args)
    except (ConfigError, ValidationError) as e:
        logger.error(f"Configuration error: {str(e)}")
        return EXIT_CONFIG
    except (MultimodalDiffusionError, OSError, ValueError) as e:
        logger.error(f"{args.command} failed: {str(e)}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
