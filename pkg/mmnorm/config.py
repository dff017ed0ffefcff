"""
Configuration settings for the multimodal normative-modeling pipeline
"""
from typing import List

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Application settings"""

    # Application
    APP_NAME: str = "mmnorm"
    VERSION: str = "1.0.0"

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FILE: str = ""  # empty: stderr only

    # Run ledger
    DATABASE_URL: str = "sqlite:///./runs/ledger.db"

    # Cohort vocabulary
    REFERENCE_TAG: str = "reference"
    HOLDOUT_TAG: str = "holdout"
    STAGE_TAG_PATTERN: str = r"stage_[1-9][0-9]*"

    # Covariates (one-hot age bins and sex)
    AGE_BIN_EDGES: List[float] = [65.0, 72.0, 79.0]
    SEX_LEVELS: List[str] = ["F", "M"]

    # Scoring
    DEFAULT_P_LEVEL: float = 0.001
    EVALUATION_P_LEVELS: List[float] = [0.001, 0.01, 0.05]
    COVARIANCE_SHRINKAGE: float = 0.05
    EVAL_MC_SAMPLES: int = 256

    # Interpretation
    SIGNIFICANCE_Z: float = 1.96
    FDR_Q: float = 0.05

    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="MMNORM_",
        case_sensitive=True,
        extra="ignore",
    )


# Create settings instance
settings = Settings()
