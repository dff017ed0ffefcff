"""
Interpretation command
"""
import argparse
import logging
from pathlib import Path

import numpy as np

from mmnorm.config import settings
from mmnorm.core.net import load_checkpoint
from mmnorm.services.dataset_service import load_dataset_dir
from mmnorm.services.interpret_service import effect_size_maps, masked_feature_scores, select_significant_dims
from mmnorm.services.scoring_service import read_report
from mmnorm.utils.errors import ContractError, UsageError
from mmnorm.utils.io import atomic_write_text
from mmnorm.utils.runs import write_manifest

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("interpret", help="Latent mask selection and region effect-size maps")
    parser.add_argument("--checkpoint", type=Path, required=True)
    parser.add_argument("--report", type=Path, required=True)
    parser.add_argument("--data-dir", type=Path, required=True)
    parser.add_argument("--out", type=Path, required=True, help="effect map CSV")
    parser.add_argument("--threshold", type=float, default=settings.SIGNIFICANCE_Z)
    parser.add_argument("--fill", choices=["zeros", "reference_means"], default="zeros")
    parser.add_argument("--keep-covariates", action="store_true")
    parser.add_argument("--q", type=float, default=settings.FDR_Q)
    parser.set_defaults(func=cmd_interpret)


def mask_path(out: Path) -> Path:
    return out.with_name(out.name + ".mask.json")


def cmd_interpret(args: argparse.Namespace) -> int:
    for path in (args.checkpoint, args.report):
        if not path.is_file():
            raise UsageError("input file not found", path=str(path))
    if not args.data_dir.is_dir():
        raise UsageError("data directory does not exist", path=str(args.data_dir))
    checkpoint = load_checkpoint(args.checkpoint)
    batch, header = load_dataset_dir(args.data_dir)
    report = read_report(args.report).set_index("subject_id")

    disease = batch.cohort_mask(set(batch.cohorts) - {settings.REFERENCE_TAG, settings.HOLDOUT_TAG})
    disease_ids = [s for s, keep in zip(batch.subject_ids, disease) if keep]
    missing = sorted(set(disease_ids) - set(report.index))
    if not disease_ids or missing:
        raise ContractError("report must cover every disease subject", missing=missing)
    z_cols = [f"z_ml_{j}" for j in range(checkpoint.layout.latent_dim)]
    z_ml = report.loc[disease_ids, z_cols].to_numpy(dtype=np.float64)

    mask = select_significant_dims(z_ml, args.threshold).model_copy(
        update={"fill": args.fill, "zero_covariates": not args.keep_covariates}
    )
    scored = batch.cohort_mask(set(batch.cohorts) - {settings.REFERENCE_TAG})
    masked = masked_feature_scores(
        checkpoint, batch.select_cohorts([settings.REFERENCE_TAG]), batch.take(scored), mask
    )
    regions = [(m.name, r) for m in header.modalities for r in m.regions]
    effects = effect_size_maps(masked.z_mf, masked.cohorts, regions, q=args.q)

    outputs = [effects.write(args.out), atomic_write_text(mask_path(args.out), mask.model_dump_json(indent=2) + "\n")]
    config = {"threshold": args.threshold, "fill": args.fill, "zero_covariates": mask.zero_covariates, "q": args.q}
    inputs = [args.checkpoint, args.report] + sorted(args.data_dir.glob("*.csv"))
    write_manifest("interpret", config, args.out, inputs, outputs)
    return 0
