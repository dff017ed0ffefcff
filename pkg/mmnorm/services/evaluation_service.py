"""
Evaluation Service
Cohort-level tables from one or more deviation reports
"""
import logging
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from mmnorm.config import settings
from mmnorm.services.scoring_service import is_outlier
from mmnorm.utils import metrics
from mmnorm.utils.errors import ContractError, IngestError, UndefinedEffectError

logger = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "method", "latent_dim", "metric", "score", "stage", "p_level", "value",
    "n_disease", "disease_outliers", "n_control", "control_outliers", "corrected",
]
SCORES = ("d_ml", "d_mf")
POOLED = "pooled"


def attach_labels(report: pd.DataFrame, labels: pd.DataFrame) -> pd.DataFrame:
    """Join cohort tags onto report rows; every reported subject needs a label"""
    labels = labels[["subject_id", "cohort"]].astype({"subject_id": str})
    merged = report.merge(labels, on="subject_id", how="left")
    missing = merged.loc[merged["cohort"].isna(), "subject_id"].unique().tolist()
    if missing:
        raise IngestError("subjects without a cohort label", ids=missing)
    return merged


def feature_dof(report: pd.DataFrame) -> int:
    return int(report["n_features"].iloc[0])


def _row(method, latent_dim, metric, score, stage, p_level, value, **counts) -> Dict:
    row = dict(method=method, latent_dim=int(latent_dim), metric=metric, score=score, stage=stage,
               p_level=p_level, value=value)
    row.update({k: counts.get(k) for k in METRIC_COLUMNS[7:]})
    return row


def _method_rows(
    frame: pd.DataFrame,
    p_levels: Sequence[float],
    stages: Sequence[str],
    control_tag: str,
    clinical: Optional[pd.DataFrame],
) -> List[Dict]:
    method = frame["method"].iloc[0]
    latent_dim = frame["latent_dim"].iloc[0]
    dof = {"d_ml": int(latent_dim), "d_mf": feature_dof(frame)}
    cohorts = frame["cohort"].to_numpy()
    control = cohorts == control_tag
    groups = {stage: cohorts == stage for stage in stages}
    groups[POOLED] = np.isin(cohorts, list(stages))

    rows = []
    for score in SCORES:
        values = frame[score].to_numpy(dtype=np.float64)
        for p in p_levels:
            flags = is_outlier(values, p, dof[score])
            for stage, disease in groups.items():
                lr = metrics.likelihood_ratio_detail(flags[disease], flags[control])
                rows.append(_row(
                    method, latent_dim, "likelihood_ratio", score, stage, p, lr.value,
                    n_disease=lr.n_disease, disease_outliers=lr.disease_outliers,
                    n_control=lr.n_control, control_outliers=lr.control_outliers, corrected=lr.corrected,
                ))
        for stage, disease in groups.items():
            rows.append(_row(
                method, latent_dim, "emd", score, stage, np.nan,
                metrics.emd_1d(values[disease], values[control]),
                n_disease=int(disease.sum()), n_control=int(control.sum()),
            ))

    for cohort, part in frame.groupby("cohort", sort=True):
        rows.append(_row(method, latent_dim, "recon_mse", "recon_mse", cohort, np.nan,
                         float(part["recon_mse"].mean()), n_disease=len(part)))

    if clinical is not None:
        joined = frame.merge(clinical, on="subject_id", how="inner")
        numeric = [c for c in clinical.columns if c != "subject_id" and pd.api.types.is_numeric_dtype(clinical[c])]
        for column in numeric:
            sub = joined[["d_ml", "d_mf", column]].dropna()
            for score in SCORES:
                try:
                    r = metrics.pearson(sub[score], sub[column])
                except (UndefinedEffectError, ContractError) as exc:
                    logger.warning("Correlation of %s with %s undefined: %s", score, column, exc)
                    r = np.nan
                rows.append(_row(method, latent_dim, f"pearson_{column}", score, POOLED, np.nan, r,
                                 n_disease=len(sub)))
    return rows


def evaluate_reports(
    report: pd.DataFrame,
    labels: pd.DataFrame,
    p_levels: Optional[Sequence[float]] = None,
    clinical: Optional[pd.DataFrame] = None,
    control_tag: Optional[str] = None,
) -> pd.DataFrame:
    """
    Long-format metrics table keyed by (method, latent dim, metric)

    Likelihood ratios for D_ml and D_mf at every p-level, EMD between
    disease and control distributions, per stage and pooled over stages;
    mean reconstruction MSE per cohort; optional clinical correlations.
    """
    p_levels = list(p_levels or settings.EVALUATION_P_LEVELS)
    control_tag = control_tag or settings.HOLDOUT_TAG
    merged = attach_labels(report, labels)
    stages = sorted(set(merged["cohort"]) - {control_tag, settings.REFERENCE_TAG})
    if not stages:
        raise ContractError("no disease cohorts to evaluate", cohorts=sorted(set(merged["cohort"])))
    if clinical is not None:
        clinical = clinical.astype({"subject_id": str})

    rows = []
    for _, frame in merged.groupby(["method", "latent_dim"], sort=True):
        rows.extend(_method_rows(frame.reset_index(drop=True), p_levels, stages, control_tag, clinical))
    table = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    logger.info("Evaluated %d method(s) over stages %s", merged.groupby(["method", "latent_dim"]).ngroups, stages)
    return table
