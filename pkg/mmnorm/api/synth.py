"""
Synthetic dataset command
"""
import argparse
import logging
from pathlib import Path

from mmnorm.models.schemas import SynthSpec
from mmnorm.services.dataset_service import generate_synthetic
from mmnorm.utils.runs import load_config, write_manifest

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("synth", help="Generate a synthetic multimodal cohort")
    parser.add_argument("--spec", type=Path, help="SynthSpec JSON file")
    parser.add_argument("--out-dir", type=Path, required=True)
    parser.add_argument("--seed", type=int)
    parser.set_defaults(func=cmd_synth)


def cmd_synth(args: argparse.Namespace) -> int:
    spec = load_config(SynthSpec, args.spec, {"seed": args.seed})
    paths = generate_synthetic(spec, args.out_dir)
    write_manifest(
        "synth",
        spec.model_dump(mode="json"),
        primary=args.out_dir / "labels.csv",
        inputs=[args.spec] if args.spec else [],
        outputs=paths,
        seed=spec.seed,
    )
    return 0
