"""
Cohort-level evaluation statistics
"""
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from mmnorm.utils.errors import ContractError, UndefinedEffectError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LikelihoodRatio:
    """Positive likelihood ratio with the counts behind it"""
    value: float
    tpr: float
    fpr: float
    disease_outliers: int
    n_disease: int
    control_outliers: int
    n_control: int
    corrected: bool


def likelihood_ratio_detail(disease_flags: Sequence[bool], control_flags: Sequence[bool]) -> LikelihoodRatio:
    """
    TPR / FPR of outlier labels

    A control cohort without outliers uses FPR = 0.5 / n_control instead of 0.
    """
    disease = np.asarray(disease_flags, dtype=bool)
    control = np.asarray(control_flags, dtype=bool)
    if disease.size == 0 or control.size == 0:
        raise ContractError("likelihood ratio needs non-empty cohorts", n_disease=disease.size, n_control=control.size)
    tp, fp = int(disease.sum()), int(control.sum())
    tpr = tp / disease.size
    corrected = fp == 0
    fpr = 0.5 / control.size if corrected else fp / control.size
    if corrected:
        logger.warning("No control outliers among %d subjects; FPR continuity correction applied", control.size)
    return LikelihoodRatio(tpr / fpr, tpr, fpr, tp, disease.size, fp, control.size, corrected)


def likelihood_ratio(disease_flags: Sequence[bool], control_flags: Sequence[bool]) -> float:
    return likelihood_ratio_detail(disease_flags, control_flags).value


def emd_1d(samples_a: Sequence[float], samples_b: Sequence[float]) -> float:
    """1-Wasserstein distance between two empirical distributions"""
    a = np.asarray(samples_a, dtype=np.float64).ravel()
    b = np.asarray(samples_b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ContractError("earth mover's distance needs non-empty samples", n_a=a.size, n_b=b.size)
    return float(stats.wasserstein_distance(a, b))


def cohens_d(group_a: Sequence[float], group_b: Sequence[float]) -> float:
    """(mean_a - mean_b) / pooled SD, pooled with n - 1 weighting"""
    a = np.asarray(group_a, dtype=np.float64).ravel()
    b = np.asarray(group_b, dtype=np.float64).ravel()
    if a.size < 2 or b.size < 2:
        raise ContractError("Cohen's d needs at least 2 values per group", n_a=a.size, n_b=b.size)
    pooled_var = ((a.size - 1) * a.var(ddof=1) + (b.size - 1) * b.var(ddof=1)) / (a.size + b.size - 2)
    if pooled_var <= 0:
        raise UndefinedEffectError("pooled standard deviation is zero")
    return float((a.mean() - b.mean()) / np.sqrt(pooled_var))


def bh_fdr(p_values: Sequence[float], q: float = 0.05) -> np.ndarray:
    """
    Benjamini-Hochberg step-up procedure

    Rejects every p <= p_(k*), k* = max{k : p_(k) <= k q / m}.

    Returns:
        Boolean rejection flags in input order
    """
    p = np.asarray(p_values, dtype=np.float64).ravel()
    if ((p < 0) | (p > 1) | np.isnan(p)).any():
        raise ContractError("p-values must lie in [0, 1]")
    m = p.size
    if m == 0:
        return np.zeros(0, dtype=bool)
    order = np.argsort(p, kind="stable")
    below = p[order] <= q * np.arange(1, m + 1) / m
    if not below.any():
        return np.zeros(m, dtype=bool)
    k = np.flatnonzero(below)[-1] + 1
    return p <= p[order[k - 1]]


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size or x.size < 2:
        raise ContractError("pearson needs two equal-length samples of size >= 2", n_x=x.size, n_y=y.size)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedEffectError("correlation undefined for a constant sample")
    return float(stats.pearsonr(x, y)[0])


def welch_p(group_a: Sequence[float], group_b: Sequence[float]) -> float:
    """Two-sided Welch t-test p-value"""
    return float(stats.ttest_ind(group_a, group_b, equal_var=False).pvalue)
