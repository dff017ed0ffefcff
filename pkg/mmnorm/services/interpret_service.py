"""
Interpretation Service
Maps significant latent deviations back to region-level effect-size maps
"""
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from mmnorm.config import settings
from mmnorm.core.net import Checkpoint
from mmnorm.models.schemas import LatentMask
from mmnorm.services.dataset_service import MultimodalBatch
from mmnorm.services.scoring_service import NormativeModel, z_scores
from mmnorm.utils import metrics
from mmnorm.utils.errors import ContractError, DimensionError, UndefinedEffectError
from mmnorm.utils.io import PathLike, atomic_write_csv

logger = logging.getLogger(__name__)

EFFECT_COLUMNS = ["modality", "stage_pair", "region", "cohens_d", "p", "rejected"]


def select_significant_dims(z_ml: np.ndarray, threshold: Optional[float] = None) -> LatentMask:
    """Latent dimensions whose mean |Z_ml| over the given subjects exceeds threshold"""
    threshold = settings.SIGNIFICANCE_Z if threshold is None else threshold
    z_ml = np.atleast_2d(np.asarray(z_ml, dtype=np.float64))
    with warnings.catch_warnings():
        # all-NaN columns (excluded dimensions) are never selected
        warnings.simplefilter("ignore", RuntimeWarning)
        scores = np.nanmean(np.abs(z_ml), axis=0)
    dims = np.flatnonzero(scores > threshold).tolist()
    logger.info("Selected latent dims %s (threshold %.3g)", dims, threshold)
    return LatentMask(dims=dims, latent_dim=z_ml.shape[1], threshold=threshold)


def mask_latents(z: np.ndarray, mask: LatentMask, reference_means: Optional[np.ndarray] = None) -> np.ndarray:
    """Replace the dimensions outside the mask with zeros or reference means"""
    if z.shape[1] != mask.latent_dim:
        raise DimensionError("latent width differs from the mask", latent=z.shape[1], mask=mask.latent_dim)
    keep = np.zeros(mask.latent_dim, dtype=bool)
    keep[mask.dims] = True
    if mask.fill == "zeros":
        fill = np.zeros(mask.latent_dim)
    else:
        if reference_means is None:
            raise ContractError("reference_means fill needs the reference latent means")
        fill = np.asarray(reference_means, dtype=np.float64).ravel()
    return np.where(keep, z, fill)


def masked_decode(
    checkpoint: Checkpoint,
    z: np.ndarray,
    mask: LatentMask,
    covariates: np.ndarray,
    reference_means: Optional[np.ndarray] = None,
) -> Dict[str, np.ndarray]:
    """
    Decode latents restricted to the mask (standardized feature scale)

    Covariates are zeroed when mask.zero_covariates is set. With every
    dimension kept and covariates kept this is the ordinary decode.
    """
    model = NormativeModel(checkpoint)
    c = np.zeros_like(covariates) if mask.zero_covariates else covariates
    return model.decode(mask_latents(z, mask, reference_means), c)


@dataclass
class MaskedScores:
    """Masked Z_mf of a cohort against reference errors recomputed under the same mask"""
    subject_ids: List[str]
    cohorts: List[str]
    z_mf: np.ndarray
    error_mean: np.ndarray
    error_sd: np.ndarray


def masked_feature_scores(
    checkpoint: Checkpoint,
    reference: MultimodalBatch,
    cohort: MultimodalBatch,
    mask: LatentMask,
) -> MaskedScores:
    """Region z-scores of masked reconstruction errors (raw batches in)"""
    model = NormativeModel(checkpoint)
    ref = model.prepare(reference)
    if ref.n_subjects < 2:
        raise ContractError("reference cohort needs at least 2 subjects", found=ref.n_subjects)
    z_ref = model.embed(ref)
    means = z_ref.mean(axis=0)

    def errors(batch: MultimodalBatch) -> np.ndarray:
        recon = masked_decode(checkpoint, model.embed(batch), mask, batch.covariates, means)
        return np.hstack([(batch.features[m] - recon[m]) ** 2 for m in model.layout.modalities])

    ref_errors = errors(ref)
    error_mean = ref_errors.mean(axis=0)
    error_sd = ref_errors.std(axis=0, ddof=1)
    target = model.prepare(cohort)
    return MaskedScores(
        subject_ids=list(target.subject_ids),
        cohorts=list(target.cohorts),
        z_mf=z_scores(errors(target), error_mean, error_sd, "region"),
        error_mean=error_mean,
        error_sd=error_sd,
    )


@dataclass
class EffectMap:
    """Cohen's d, Welch p and BH rejection per (modality, stage pair, region)"""
    frame: pd.DataFrame

    def write(self, path: PathLike) -> Path:
        return atomic_write_csv(path, self.frame)


def effect_size_maps(
    z_mf: np.ndarray,
    cohorts: Sequence[str],
    regions: Sequence[Tuple[str, str]],
    control_tag: Optional[str] = None,
    stage_tags: Optional[Sequence[str]] = None,
    q: Optional[float] = None,
) -> EffectMap:
    """
    Stage-versus-control effect sizes on |Z_mf|

    Args:
        z_mf: subjects x regions masked feature z-scores
        cohorts: cohort tag per subject row
        regions: (modality, region) per column
        control_tag: comparison cohort (default: the holdout tag)
        stage_tags: disease stages (default: every tag except reference and control)
        q: BH level applied within each (modality, stage pair)

    Regions where either group is degenerate get NaN statistics and are left
    out of the FDR family.
    """
    control_tag = control_tag or settings.HOLDOUT_TAG
    q = settings.FDR_Q if q is None else q
    cohorts = np.asarray(cohorts)
    if z_mf.shape != (cohorts.size, len(regions)):
        raise DimensionError("z-score matrix does not match cohorts and regions",
                             z_mf=z_mf.shape, subjects=cohorts.size, regions=len(regions))
    if stage_tags is None:
        stage_tags = sorted(set(cohorts.tolist()) - {control_tag, settings.REFERENCE_TAG})
    magnitude = np.abs(z_mf)
    control = magnitude[cohorts == control_tag]
    if control.shape[0] < 2:
        raise ContractError("control cohort needs at least 2 subjects", cohort=control_tag, found=control.shape[0])

    modalities = list(dict.fromkeys(m for m, _ in regions))
    rows = []
    for stage in stage_tags:
        group = magnitude[cohorts == stage]
        if group.shape[0] < 2:
            raise ContractError("stage cohort needs at least 2 subjects", cohort=stage, found=group.shape[0])
        for modality in modalities:
            cols = [i for i, (m, _) in enumerate(regions) if m == modality]
            family = []
            for i in cols:
                a = group[:, i][~np.isnan(group[:, i])]
                b = control[:, i][~np.isnan(control[:, i])]
                try:
                    d = metrics.cohens_d(a, b)
                    p = metrics.welch_p(a, b)
                except (UndefinedEffectError, ContractError):
                    d, p = np.nan, np.nan
                if not np.isfinite(p):
                    logger.warning("Effect undefined for %s %s (%s vs %s)", modality, regions[i][1], stage, control_tag)
                    d, p = np.nan, np.nan
                family.append((regions[i][1], d, p))
            p_values = np.array([p for _, _, p in family])
            defined = ~np.isnan(p_values)
            rejected = np.zeros(len(family), dtype=bool)
            rejected[defined] = metrics.bh_fdr(p_values[defined], q)
            pair = f"{stage}_vs_{control_tag}"
            rows.extend((modality, pair, region, d, p, bool(r)) for (region, d, p), r in zip(family, rejected))

    frame = pd.DataFrame(rows, columns=EFFECT_COLUMNS)
    logger.info("Effect map: %d of %d region tests rejected at q=%g", int(frame["rejected"].sum()), len(frame), q)
    return EffectMap(frame)
