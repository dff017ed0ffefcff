"""
Scoring command
"""
import argparse
import logging
from pathlib import Path

from mmnorm.config import settings
from mmnorm.core.net import load_checkpoint
from mmnorm.services.dataset_service import load_dataset_dir
from mmnorm.services.scoring_service import EMBEDDING_MODES, fit_reference, score_subjects
from mmnorm.utils.errors import UsageError
from mmnorm.utils.runs import write_manifest

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("score", help="Fit reference statistics and score every subject")
    parser.add_argument("--checkpoint", type=Path, required=True)
    parser.add_argument("--data-dir", type=Path, required=True)
    parser.add_argument("--out", type=Path, required=True, help="deviation report CSV")
    parser.add_argument("--p-level", type=float, default=settings.DEFAULT_P_LEVEL)
    parser.add_argument("--shrinkage", type=float, default=settings.COVARIANCE_SHRINKAGE)
    parser.add_argument("--embedding", choices=EMBEDDING_MODES, default="mean")
    parser.add_argument("--mc-samples", type=int, default=settings.EVAL_MC_SAMPLES)
    parser.add_argument("--seed", type=int, default=0)
    parser.set_defaults(func=cmd_score)


def reference_stats_path(report: Path) -> Path:
    return report.with_name(report.name + ".reference.json")


def cmd_score(args: argparse.Namespace) -> int:
    if not args.checkpoint.is_file():
        raise UsageError("checkpoint not found", path=str(args.checkpoint))
    if not args.data_dir.is_dir():
        raise UsageError("data directory does not exist", path=str(args.data_dir))
    checkpoint = load_checkpoint(args.checkpoint)
    batch, header = load_dataset_dir(args.data_dir)

    reference = fit_reference(
        checkpoint, batch.select_cohorts([settings.REFERENCE_TAG]), args.shrinkage, args.embedding, args.seed
    )
    report = score_subjects(checkpoint, reference, batch, args.p_level, header, args.seed, args.mc_samples)
    outputs = [report.write(args.out), reference.save(reference_stats_path(args.out))]

    config = {
        "p_level": args.p_level,
        "shrinkage": args.shrinkage,
        "embedding": args.embedding,
        "mc_samples": args.mc_samples,
        "reference_tag": settings.REFERENCE_TAG,
    }
    inputs = [args.checkpoint] + sorted(args.data_dir.glob("*.csv"))
    write_manifest("score", config, args.out, inputs, outputs, seed=args.seed)
    return 0
