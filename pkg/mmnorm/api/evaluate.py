"""
Evaluation command
"""
import argparse
import logging
from pathlib import Path

import pandas as pd

from mmnorm.config import settings
from mmnorm.services.evaluation_service import evaluate_reports
from mmnorm.services.scoring_service import read_report
from mmnorm.utils.errors import UsageError
from mmnorm.utils.io import atomic_write_csv
from mmnorm.utils.runs import write_manifest

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("evaluate", help="Likelihood ratios, EMD and cohort summaries")
    parser.add_argument("--report", type=Path, nargs="+", required=True, help="one or more deviation reports")
    parser.add_argument("--labels", type=Path, required=True)
    parser.add_argument("--out", type=Path, required=True, help="metrics table CSV")
    parser.add_argument("--p-levels", type=float, nargs="+", default=list(settings.EVALUATION_P_LEVELS))
    parser.add_argument("--clinical", type=Path, help="CSV with subject_id and numeric clinical scores")
    parser.set_defaults(func=cmd_evaluate)


def cmd_evaluate(args: argparse.Namespace) -> int:
    inputs = list(args.report) + [args.labels] + ([args.clinical] if args.clinical else [])
    for path in inputs:
        if not path.is_file():
            raise UsageError("input file not found", path=str(path))
    report = pd.concat([read_report(p) for p in args.report], ignore_index=True)
    labels = pd.read_csv(args.labels, dtype={"subject_id": str})
    clinical = pd.read_csv(args.clinical, dtype={"subject_id": str}) if args.clinical else None

    table = evaluate_reports(report, labels, args.p_levels, clinical)
    outputs = [atomic_write_csv(args.out, table)]
    config = {"p_levels": list(args.p_levels), "control_tag": settings.HOLDOUT_TAG, "clinical": bool(args.clinical)}
    write_manifest("evaluate", config, args.out, inputs, outputs)
    return 0
