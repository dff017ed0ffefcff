"""
Pydantic schemas for run configuration, dataset headers and emitted records
"""
from datetime import datetime
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from mmnorm.core.fusion import FusionMethod, FusionSpec


# Loss / fusion / training configuration
class LossHyper(BaseModel):
    """Weights of the introspective encoder and decoder losses"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    beta_rec: float = Field(1.0, ge=0)
    beta_kl: float = Field(1.0, ge=0)
    beta_neg: float = Field(10.0, ge=0)
    gamma_r: float = Field(1e-8, ge=0)
    s: Optional[float] = Field(None, gt=0)  # None: 1 / total feature count

    def resolved(self, total_features: int) -> "LossHyper":
        if self.s is not None:
            return self
        return self.model_copy(update={"s": 1.0 / total_features})


class FusionConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    method: FusionMethod = FusionMethod.MOPOE
    include_prior_in_subsets: bool = True

    def to_spec(self) -> FusionSpec:
        return FusionSpec(method=self.method, include_prior_in_subsets=self.include_prior_in_subsets)


class TrainConfig(BaseModel):
    """Training run configuration; JSON config files mirror these keys"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    epochs: int = Field(500, ge=1)
    batch_size: int = Field(64, ge=1)
    learning_rate: float = Field(1e-5, ge=0)
    latent_dim: int = Field(15, ge=1)
    seed: int = 0
    fusion: FusionConfig = FusionConfig()
    loss: LossHyper = LossHyper()
    objective: Literal["sivae", "vae"] = "sivae"
    recon_reduction: Literal["mean", "sum"] = "mean"
    encoder_covariates: bool = True
    decoder_covariates: bool = True
    activation: Literal["relu", "tanh"] = "relu"
    encoder_hidden: Tuple[int, ...] = (64, 32)
    decoder_hidden: Tuple[int, ...] = (32, 64)
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)

    @field_validator("encoder_hidden", "decoder_hidden")
    @classmethod
    def check_hidden(cls, sizes: Tuple[int, ...]) -> Tuple[int, ...]:
        if not 1 <= len(sizes) <= 2 or any(size < 1 for size in sizes):
            raise ValueError("one or two hidden layers of positive width are supported")
        return sizes


# Dataset
class ModalityHeader(BaseModel):
    name: str
    regions: List[str]

    @property
    def width(self) -> int:
        return len(self.regions)


class CovariateLayout(BaseModel):
    """One-hot age bins followed by one-hot sex"""
    age_bin_edges: List[float]
    sex_levels: List[str]

    @field_validator("age_bin_edges")
    @classmethod
    def check_edges(cls, edges: List[float]) -> List[float]:
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError("age bin edges must be strictly increasing")
        return edges

    @property
    def width(self) -> int:
        return len(self.age_bin_edges) + 1 + len(self.sex_levels)

    @property
    def column_names(self) -> List[str]:
        edges = self.age_bin_edges
        bounds = ["-inf"] + [f"{e:g}" for e in edges] + ["inf"]
        ages = [f"age[{lo},{hi})" for lo, hi in zip(bounds, bounds[1:])]
        return ages + [f"sex={level}" for level in self.sex_levels]


class DatasetHeader(BaseModel):
    modalities: List[ModalityHeader]
    covariates: CovariateLayout

    @model_validator(mode="after")
    def check_modalities(self) -> "DatasetHeader":
        names = [m.name for m in self.modalities]
        if not names:
            raise ValueError("at least one modality is required")
        if len(set(names)) != len(names):
            raise ValueError(f"modality names must be unique: {names}")
        for m in self.modalities:
            if m.width == 0:
                raise ValueError(f"modality {m.name} has no regions")
            if len(set(m.regions)) != m.width:
                raise ValueError(f"region names of {m.name} must be unique")
        return self

    @property
    def modality_names(self) -> List[str]:
        return [m.name for m in self.modalities]

    @property
    def total_features(self) -> int:
        return sum(m.width for m in self.modalities)


class SynthSpec(BaseModel):
    """Synthetic cohort generator settings"""
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    n_reference: int = Field(248, ge=2)
    n_holdout: int = Field(48, ge=2)
    stage_sizes: List[int] = [305, 236, 185]
    stage_shifts: List[float] = [0.75, 1.5, 2.5]
    modality_names: List[str] = ["MRI", "PET"]
    shift_signs: List[float] = [-1.0, 1.0]  # atrophy lowers MRI, amyloid raises PET
    n_cortical: int = Field(66, ge=0)
    n_subcortical: int = Field(24, ge=0)
    latent_factors: int = Field(5, ge=1)
    noise_sd: float = Field(0.5, ge=0)
    shifted_regions: int = Field(12, ge=0)
    age_range: Tuple[float, float] = (55.0, 90.0)
    p_female: float = Field(0.5, ge=0, le=1)
    age_effect: float = 0.3
    sex_effect: float = 0.2

    @model_validator(mode="after")
    def check_cohorts(self) -> "SynthSpec":
        if len(self.stage_sizes) != len(self.stage_shifts):
            raise ValueError("stage_sizes and stage_shifts must have the same length")
        if any(n < 2 for n in self.stage_sizes):
            raise ValueError("every stage needs at least 2 subjects")
        if any(b < a for a, b in zip(self.stage_shifts, self.stage_shifts[1:])):
            raise ValueError("stage shifts must be monotone nondecreasing")
        if len(self.shift_signs) != len(self.modality_names):
            raise ValueError("one shift sign per modality is required")
        if self.n_cortical + self.n_subcortical < 1:
            raise ValueError("at least one region is required")
        if self.shifted_regions > self.n_cortical + self.n_subcortical:
            raise ValueError("shifted_regions exceeds the region count")
        if self.age_range[1] <= self.age_range[0]:
            raise ValueError("age_range must be increasing")
        return self

    @property
    def stage_tags(self) -> List[str]:
        return [f"stage_{i + 1}" for i in range(len(self.stage_sizes))]


# Emitted records
class EpochRecord(BaseModel):
    """One train-log line"""
    epoch: int
    encoder_loss: float
    decoder_loss: float
    recon_real: float
    kl_real: float
    wall_time: float


class LatentMask(BaseModel):
    """Latent dimensions kept for interpretation and how the rest are filled"""
    dims: List[int]
    latent_dim: int
    fill: Literal["zeros", "reference_means"] = "zeros"
    zero_covariates: bool = True
    threshold: float = 1.96
    rule: str = "mean |Z_ml| over disease subjects > threshold"

    @model_validator(mode="after")
    def check_dims(self) -> "LatentMask":
        if any(j < 0 or j >= self.latent_dim for j in self.dims):
            raise ValueError(f"mask dims must lie in [0, {self.latent_dim})")
        return self


class RunManifest(BaseModel):
    command: str
    config: Dict[str, Any]
    seed: Optional[int] = None
    input_hashes: Dict[str, str]
    output_paths: List[str]
    tool_version: str
    created_at: datetime
