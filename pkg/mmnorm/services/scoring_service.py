"""
Scoring Service
Reference-cohort statistics and subject-level deviation scores

Latent deviation D_ml is the Mahalanobis distance of a subject's joint
posterior embedding from the reference embeddings; feature deviation D_mf
is the Mahalanobis distance of its per-region squared reconstruction errors
from the reference errors. Z_ml / Z_mf are the per-dimension z-scores.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import linalg, stats
from sklearn.covariance import shrunk_covariance

from mmnorm.config import settings
from mmnorm.core import net
from mmnorm.core.fusion import MixturePosterior, fuse, joint_posterior_mean
from mmnorm.core.gauss import DiagGaussian
from mmnorm.core.net import Checkpoint
from mmnorm.core.numkit import Tape
from mmnorm.models.schemas import DatasetHeader
from mmnorm.services.dataset_service import MultimodalBatch, StandardizationStats, standardize
from mmnorm.utils.errors import ContractError, DimensionError, NumericError
from mmnorm.utils.io import PathLike, atomic_write_csv, atomic_write_text

logger = logging.getLogger(__name__)

EMBEDDING_MODES = ("mean", "sample")


class NormativeModel:
    """Frozen checkpoint wrapped for inference on raw (unstandardized) batches"""

    def __init__(self, checkpoint: Checkpoint):
        self.checkpoint = checkpoint
        self.layout = checkpoint.layout
        self.stats = StandardizationStats.from_checkpoint(checkpoint.standardization)

    @property
    def method(self) -> str:
        objective = self.checkpoint.train_config.get("objective", "sivae")
        return f"{objective}-{self.checkpoint.fusion.method.value}"

    def prepare(self, batch: MultimodalBatch) -> MultimodalBatch:
        """Check widths against the layout and standardize with the stored statistics"""
        widths = {m: x.shape[1] for m, x in batch.features.items()}
        if widths != dict(self.layout.modality_widths):
            raise DimensionError("dataset does not match the checkpoint layout",
                                 dataset=widths, checkpoint=dict(self.layout.modality_widths))
        if batch.covariates.shape[1] != self.layout.covariate_width:
            raise DimensionError("covariate width does not match the checkpoint",
                                 dataset=batch.covariates.shape[1], checkpoint=self.layout.covariate_width)
        return standardize(batch, self.stats)

    def _bound(self, tape: Tape):
        return {name: tape.constant(value) for name, value in self.checkpoint.params.items()}

    def posterior(self, tape: Tape, batch: MultimodalBatch) -> MixturePosterior:
        params = self._bound(tape)
        c = tape.constant(batch.covariates)
        unimodal = [
            net.encode(params, self.layout, m, batch.features[m], c) for m in self.layout.modalities
        ]
        return fuse(unimodal, self.checkpoint.fusion)

    def embed(self, batch: MultimodalBatch, mode: str = "mean", rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Joint posterior mean (default) or one stratified posterior sample per subject"""
        if mode not in EMBEDDING_MODES:
            raise ContractError("unknown embedding mode", mode=mode, allowed=EMBEDDING_MODES)
        mix = self.posterior(Tape(), batch)
        if mode == "mean":
            return joint_posterior_mean(mix).numpy()
        rng = rng or np.random.default_rng(0)
        return mix.sample(rng.standard_normal((mix.rows, mix.dim))).numpy()

    def decode(self, z: np.ndarray, covariates: np.ndarray) -> Dict[str, np.ndarray]:
        tape = Tape()
        params = self._bound(tape)
        c = tape.constant(covariates)
        return {m: net.decode(params, self.layout, m, z, c).numpy() for m in self.layout.modalities}

    def region_errors(self, batch: MultimodalBatch, z: np.ndarray, covariates: Optional[np.ndarray] = None) -> np.ndarray:
        """Per-region squared reconstruction errors, modalities concatenated in layout order"""
        recon = self.decode(z, batch.covariates if covariates is None else covariates)
        return np.hstack([(batch.features[m] - recon[m]) ** 2 for m in self.layout.modalities])

    def kl_joint(self, batch: MultimodalBatch, n_mc: int, rng: np.random.Generator) -> np.ndarray:
        """Per-subject KL of the fused posterior to N(0, I), averaged over n_mc draws"""
        mix = self.posterior(Tape(), batch)
        if len(mix.components) == 1:
            return mix.kl_to_prior(None).numpy().ravel()
        mus = [q.mu.numpy() for q in mix.components]
        logvars = [q.logvar.numpy() for q in mix.components]
        total = np.zeros(mix.rows)
        for _ in range(n_mc):
            # one draw per tape keeps memory flat
            tape = Tape()
            components = [DiagGaussian.constant(tape, mu, lv) for mu, lv in zip(mus, logvars)]
            draw = MixturePosterior(tuple(components), mix.weights, mix.subsets)
            total += draw.kl_to_prior(rng.standard_normal((1, mix.rows, mix.dim))).numpy().ravel()
        return total / n_mc


@dataclass(frozen=True)
class ReferenceStats:
    """Reference-cohort latent and reconstruction-error statistics"""
    latent_mean: np.ndarray
    latent_cov: np.ndarray
    latent_sd: np.ndarray
    error_mean: np.ndarray
    error_cov: np.ndarray
    error_sd: np.ndarray
    shrinkage: float
    embedding: str = "mean"
    n_subjects: int = 0

    def to_dict(self) -> dict:
        return {
            "latent_mean": self.latent_mean.tolist(),
            "latent_cov": self.latent_cov.tolist(),
            "latent_sd": self.latent_sd.tolist(),
            "error_mean": self.error_mean.tolist(),
            "error_cov": self.error_cov.tolist(),
            "error_sd": self.error_sd.tolist(),
            "shrinkage": self.shrinkage,
            "embedding": self.embedding,
            "n_subjects": self.n_subjects,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ReferenceStats":
        arrays = {
            key: np.asarray(data[key], dtype=np.float64)
            for key in ("latent_mean", "latent_cov", "latent_sd", "error_mean", "error_cov", "error_sd")
        }
        return cls(**arrays, shrinkage=float(data["shrinkage"]), embedding=data["embedding"],
                   n_subjects=int(data["n_subjects"]))

    def save(self, path: PathLike) -> Path:
        return atomic_write_text(path, json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: PathLike) -> "ReferenceStats":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def shrink_covariance(samples: np.ndarray, shrinkage: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Sample mean and shrunk sample covariance

    (1 - l) * S + l * trace(S) / dim * I; a zero-trace S shrinks towards I.
    """
    if samples.shape[0] < 2:
        raise ContractError("covariance needs at least 2 subjects", found=samples.shape[0])
    if not 0.0 <= shrinkage <= 1.0:
        raise ContractError("shrinkage must lie in [0, 1]", shrinkage=shrinkage)
    mean = samples.mean(axis=0)
    sample_cov = np.atleast_2d(np.cov(samples, rowvar=False, ddof=1))
    if np.trace(sample_cov) > 0:
        cov = shrunk_covariance(sample_cov, shrinkage=shrinkage)
    else:
        logger.warning("Reference covariance is zero; shrinking towards the identity")
        cov = (1.0 - shrinkage) * sample_cov + shrinkage * np.eye(sample_cov.shape[0])
    return mean, cov


def _cholesky(sigma: np.ndarray, what: str = "covariance") -> np.ndarray:
    try:
        return linalg.cholesky(sigma, lower=True)
    except (linalg.LinAlgError, ValueError) as exc:
        eig = np.linalg.eigvalsh((sigma + sigma.T) / 2.0)
        raise NumericError(
            f"{what} is not positive definite",
            min_eigenvalue=float(eig.min()), max_eigenvalue=float(eig.max()), dim=sigma.shape[0],
        ) from exc


def mahalanobis(x: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> float:
    """sqrt((x - mu)^T sigma^-1 (x - mu)) via a Cholesky solve"""
    diff = np.asarray(x, dtype=np.float64).ravel() - np.asarray(mu, dtype=np.float64).ravel()
    sigma = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
    if sigma.shape != (diff.size, diff.size):
        raise DimensionError("covariance shape mismatch", x=diff.size, sigma=sigma.shape)
    solved = linalg.cho_solve((_cholesky(sigma), True), diff)
    return float(np.sqrt(max(diff @ solved, 0.0)))


def mahalanobis_rows(x: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Row-wise Mahalanobis distances of an n x dim matrix"""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
    if x.shape[1] != np.asarray(mu).size or sigma.shape != (x.shape[1], x.shape[1]):
        raise DimensionError("covariance shape mismatch", x=x.shape, sigma=sigma.shape)
    lower = _cholesky(sigma)
    whitened = linalg.solve_triangular(lower, (x - mu).T, lower=True)
    return np.sqrt(np.sum(whitened ** 2, axis=0))


def outlier_threshold(p_level: float, dof: int) -> float:
    """Squared-distance cut-off: the chi-square (1 - p) quantile"""
    if not 0.0 < p_level < 1.0:
        raise ContractError("p-level must lie in (0, 1)", p_level=p_level)
    return float(stats.chi2.isf(p_level, dof))


def is_outlier(distance: np.ndarray, p_level: float, dof: int) -> np.ndarray:
    return np.asarray(distance) ** 2 > outlier_threshold(p_level, dof)


def z_scores(values: np.ndarray, mean: np.ndarray, sd: np.ndarray, label: str = "dimension") -> np.ndarray:
    """(value - mean) / sd; dimensions with zero reference SD become NaN"""
    out = np.full(values.shape, np.nan)
    ok = sd > 0
    if not ok.all():
        logger.warning("Excluding %d %s(s) with zero reference SD from z-scores: %s",
                       int((~ok).sum()), label, np.flatnonzero(~ok).tolist())
    out[:, ok] = (values[:, ok] - mean[ok]) / sd[ok]
    return out


def fit_reference(
    checkpoint: Checkpoint,
    reference: MultimodalBatch,
    shrinkage: Optional[float] = None,
    embedding: str = "mean",
    seed: int = 0,
) -> ReferenceStats:
    """
    Latent and error statistics of a reference cohort (raw features)

    Raises:
        ContractError: fewer than 2 subjects
        NumericError: a shrunk covariance is still not positive definite
    """
    shrinkage = settings.COVARIANCE_SHRINKAGE if shrinkage is None else shrinkage
    if reference.n_subjects < 2:
        raise ContractError("reference cohort needs at least 2 subjects", found=reference.n_subjects)
    model = NormativeModel(checkpoint)
    batch = model.prepare(reference)
    z = model.embed(batch, embedding, np.random.default_rng(seed))
    errors = model.region_errors(batch, z)

    latent_mean, latent_cov = shrink_covariance(z, shrinkage)
    error_mean, error_cov = shrink_covariance(errors, shrinkage)
    _cholesky(latent_cov, "latent covariance")
    _cholesky(error_cov, "reconstruction-error covariance")
    logger.info("Fitted reference statistics on %d subjects (shrinkage %.3g)", batch.n_subjects, shrinkage)
    return ReferenceStats(
        latent_mean=latent_mean,
        latent_cov=latent_cov,
        latent_sd=z.std(axis=0, ddof=1),
        error_mean=error_mean,
        error_cov=error_cov,
        error_sd=errors.std(axis=0, ddof=1),
        shrinkage=shrinkage,
        embedding=embedding,
        n_subjects=batch.n_subjects,
    )


@dataclass
class DeviationReport:
    """Per-subject deviation scores; one row per subject"""
    subject_ids: List[str]
    method: str
    latent_dim: int
    d_ml: np.ndarray
    d_mf: np.ndarray
    z_ml: np.ndarray
    z_mf: np.ndarray
    outlier_latent: np.ndarray
    outlier_feature: np.ndarray
    p_level: float
    recon_mse: np.ndarray
    kl_joint: np.ndarray
    feature_columns: List[str] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({
            "subject_id": self.subject_ids,
            "method": self.method,
            "latent_dim": self.latent_dim,
            "n_features": self.z_mf.shape[1],
            "d_ml": self.d_ml,
            "d_mf": self.d_mf,
            "outlier_latent": self.outlier_latent.astype(int),
            "outlier_feature": self.outlier_feature.astype(int),
            "p_level": self.p_level,
            "recon_mse": self.recon_mse,
            "kl_joint": self.kl_joint,
        })
        latent = pd.DataFrame(self.z_ml, columns=[f"z_ml_{j}" for j in range(self.z_ml.shape[1])])
        features = pd.DataFrame(self.z_mf, columns=[f"z_mf_{name}" for name in self.feature_columns])
        return pd.concat([frame, latent, features], axis=1)

    def write(self, path: PathLike) -> Path:
        return atomic_write_csv(path, self.to_frame())


def read_report(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(path, dtype={"subject_id": str}, float_precision="round_trip")


def feature_column_names(header: Optional[DatasetHeader], checkpoint: Checkpoint) -> List[str]:
    if header is not None:
        return [f"{m.name}_{region}" for m in header.modalities for region in m.regions]
    return [f"{m}_r{i:03d}" for m, w in checkpoint.layout.modality_widths for i in range(w)]


def score_subjects(
    checkpoint: Checkpoint,
    reference: ReferenceStats,
    cohort: MultimodalBatch,
    p_level: Optional[float] = None,
    header: Optional[DatasetHeader] = None,
    seed: int = 0,
    n_mc: Optional[int] = None,
) -> DeviationReport:
    """
    Deviation scores of every subject in a raw cohort

    The embedding mode follows the one the reference statistics were fitted
    with. A subject is an outlier when D^2 exceeds the chi-square (1 - p)
    quantile with dof equal to the vector dimension.
    """
    p_level = settings.DEFAULT_P_LEVEL if p_level is None else p_level
    n_mc = settings.EVAL_MC_SAMPLES if n_mc is None else n_mc
    model = NormativeModel(checkpoint)
    batch = model.prepare(cohort)
    if reference.latent_mean.size != model.layout.latent_dim or reference.error_mean.size != model.layout.total_features:
        raise DimensionError("reference statistics do not match the checkpoint",
                             latent=reference.latent_mean.size, features=reference.error_mean.size)
    rng = np.random.default_rng(seed)
    z = model.embed(batch, reference.embedding, rng)
    errors = model.region_errors(batch, z)

    d_ml = mahalanobis_rows(z, reference.latent_mean, reference.latent_cov)
    d_mf = mahalanobis_rows(errors, reference.error_mean, reference.error_cov)
    report = DeviationReport(
        subject_ids=list(batch.subject_ids),
        method=model.method,
        latent_dim=model.layout.latent_dim,
        d_ml=d_ml,
        d_mf=d_mf,
        z_ml=z_scores(z, reference.latent_mean, reference.latent_sd, "latent dimension"),
        z_mf=z_scores(errors, reference.error_mean, reference.error_sd, "region"),
        outlier_latent=is_outlier(d_ml, p_level, z.shape[1]),
        outlier_feature=is_outlier(d_mf, p_level, errors.shape[1]),
        p_level=p_level,
        recon_mse=errors.mean(axis=1),
        kl_joint=model.kl_joint(batch, n_mc, rng),
        feature_columns=feature_column_names(header, checkpoint),
    )
    logger.info(
        "Scored %d subjects: %d latent and %d feature outliers at p=%g",
        batch.n_subjects, int(report.outlier_latent.sum()), int(report.outlier_feature.sum()), p_level,
    )
    return report
