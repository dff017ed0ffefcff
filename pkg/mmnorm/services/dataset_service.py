"""
Dataset Service
Handles CSV ingest, standardization and the synthetic multimodal cohort

File layout of a dataset directory:
    features_<MODALITY>.csv   subject_id, <region>, ...
    covariates.csv            subject_id, age, sex
    labels.csv                subject_id, cohort
    header.json               DatasetHeader
"""
import json
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from mmnorm.config import settings
from mmnorm.models.schemas import CovariateLayout, DatasetHeader, ModalityHeader, SynthSpec
from mmnorm.utils.errors import (
    DataValidationError,
    DimensionError,
    IngestError,
    ParseError,
    UsageError,
)
from mmnorm.utils.io import PathLike, atomic_write_csv, atomic_write_text

logger = logging.getLogger(__name__)

SUBJECT_COLUMN = "subject_id"
FEATURE_PREFIX = "features_"


@dataclass(frozen=True)
class MultimodalBatch:
    """Per-modality feature matrices plus covariates, row-aligned by subject"""
    subject_ids: Tuple[str, ...]
    features: Dict[str, np.ndarray]
    covariates: np.ndarray
    cohorts: Tuple[str, ...]
    ages: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sexes: Tuple[str, ...] = ()

    def __post_init__(self):
        n = len(self.subject_ids)
        if len(self.cohorts) != n or self.covariates.shape[0] != n:
            raise DimensionError("cohorts and covariates must have one row per subject", subjects=n)
        for name, x in self.features.items():
            if x.ndim != 2 or x.shape[0] != n:
                raise DimensionError(f"{name}: one feature row per subject is required", subjects=n)

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def modality_names(self) -> List[str]:
        return list(self.features)

    @property
    def total_features(self) -> int:
        return sum(x.shape[1] for x in self.features.values())

    def cohort_mask(self, tags: Iterable[str]) -> np.ndarray:
        tags = set(tags)
        return np.array([c in tags for c in self.cohorts], dtype=bool)

    def take(self, rows) -> "MultimodalBatch":
        """Subset (or reorder) subjects by index array or boolean mask"""
        idx = np.arange(self.n_subjects)[np.asarray(rows)]
        return MultimodalBatch(
            subject_ids=tuple(self.subject_ids[i] for i in idx),
            features={m: x[idx] for m, x in self.features.items()},
            covariates=self.covariates[idx],
            cohorts=tuple(self.cohorts[i] for i in idx),
            ages=self.ages[idx] if self.ages.size else self.ages,
            sexes=tuple(self.sexes[i] for i in idx) if self.sexes else (),
        )

    def select_cohorts(self, tags: Iterable[str]) -> "MultimodalBatch":
        return self.take(self.cohort_mask(tags))

    def with_features(self, features: Dict[str, np.ndarray]) -> "MultimodalBatch":
        return replace(self, features=features)


@dataclass(frozen=True)
class StandardizationStats:
    """Per-region mean and SD of the reference cohort"""
    mean: Dict[str, np.ndarray]
    sd: Dict[str, np.ndarray]

    @classmethod
    def fit(cls, batch: MultimodalBatch, reference_tag: Optional[str] = None) -> "StandardizationStats":
        """Statistics from rows tagged as reference only (SD with n-1 denominator)"""
        reference_tag = reference_tag or settings.REFERENCE_TAG
        rows = batch.cohort_mask([reference_tag])
        if rows.sum() < 2:
            raise DataValidationError("standardization needs at least 2 reference subjects", found=int(rows.sum()))
        mean, sd = {}, {}
        for m, x in batch.features.items():
            ref = x[rows]
            mean[m] = ref.mean(axis=0)
            sd[m] = ref.std(axis=0, ddof=1)
            flat = np.flatnonzero(sd[m] == 0)
            if flat.size:
                raise DataValidationError(
                    f"{m}: regions with zero variance in the reference cohort", regions=flat.tolist()
                )
        return cls(mean=mean, sd=sd)

    def to_checkpoint(self) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
        return {m: (self.mean[m], self.sd[m]) for m in self.mean}

    @classmethod
    def from_checkpoint(cls, stored: Mapping[str, Tuple[np.ndarray, np.ndarray]]) -> "StandardizationStats":
        if not stored:
            raise DataValidationError("checkpoint carries no standardization statistics")
        return cls(
            mean={m: np.asarray(v[0]).ravel() for m, v in stored.items()},
            sd={m: np.asarray(v[1]).ravel() for m, v in stored.items()},
        )


def standardize(batch: MultimodalBatch, stats: StandardizationStats) -> MultimodalBatch:
    """(x - mean) / SD per region, using reference statistics for every cohort"""
    _check_stats(batch, stats)
    return batch.with_features({m: (x - stats.mean[m]) / stats.sd[m] for m, x in batch.features.items()})


def destandardize(batch: MultimodalBatch, stats: StandardizationStats) -> MultimodalBatch:
    _check_stats(batch, stats)
    return batch.with_features({m: x * stats.sd[m] + stats.mean[m] for m, x in batch.features.items()})


def _check_stats(batch: MultimodalBatch, stats: StandardizationStats) -> None:
    for m, x in batch.features.items():
        if m not in stats.mean or stats.mean[m].shape != (x.shape[1],):
            raise DimensionError(f"{m}: standardization statistics do not match the features")


# Covariates
def default_covariate_layout() -> CovariateLayout:
    return CovariateLayout(age_bin_edges=list(settings.AGE_BIN_EDGES), sex_levels=list(settings.SEX_LEVELS))


def encode_covariates(ages: np.ndarray, sexes: Sequence[str], layout: CovariateLayout) -> np.ndarray:
    """One-hot age bin followed by one-hot sex"""
    ages = np.asarray(ages, dtype=np.float64)
    n_bins = len(layout.age_bin_edges) + 1
    out = np.zeros((len(ages), layout.width))
    out[np.arange(len(ages)), np.searchsorted(layout.age_bin_edges, ages, side="right")] = 1.0
    for i, sex in enumerate(sexes):
        if sex not in layout.sex_levels:
            raise ParseError("unknown sex level", row=i + 2, value=sex, allowed=layout.sex_levels)
        out[i, n_bins + layout.sex_levels.index(sex)] = 1.0
    return out


# Ingest
def _read_table(path: Path, required: Sequence[str] = ()) -> pd.DataFrame:
    if not path.exists():
        raise IngestError("input file not found", path=str(path))
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ParseError("malformed CSV", path=str(path), cause=str(exc)) from exc
    if not len(frame.columns) or frame.columns[0] != SUBJECT_COLUMN:
        raise ParseError(f"first column must be {SUBJECT_COLUMN}", path=str(path))
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise ParseError("required columns missing", path=str(path), columns=missing)
    duplicated = frame[SUBJECT_COLUMN][frame[SUBJECT_COLUMN].duplicated()].tolist()
    if duplicated:
        raise IngestError("duplicate subject ids", path=str(path), ids=duplicated)
    return frame.set_index(SUBJECT_COLUMN)


def check_cohort_tags(tags: Iterable[str], path: Optional[Path] = None) -> None:
    """Reference, holdout and stage_<n> are the only accepted cohort tags"""
    fixed = {settings.REFERENCE_TAG, settings.HOLDOUT_TAG}
    unknown = sorted({t for t in tags if t not in fixed and not re.fullmatch(settings.STAGE_TAG_PATTERN, t)})
    if unknown:
        raise IngestError(
            "cohort tags outside the declared vocabulary",
            path=None if path is None else str(path),
            tags=unknown,
            allowed=sorted(fixed) + [settings.STAGE_TAG_PATTERN],
        )


def _to_float(frame: pd.DataFrame, path: Path) -> np.ndarray:
    values = frame.to_numpy(dtype=object)
    try:
        out = values.astype(np.float64)
    except ValueError:
        out = None
    if out is None or not np.isfinite(out).all():
        for r in range(values.shape[0]):
            for c in range(values.shape[1]):
                try:
                    ok = np.isfinite(float(values[r, c]))
                except ValueError:
                    ok = False
                if not ok:
                    raise ParseError(
                        "non-numeric cell", path=str(path), row=r + 2,
                        column=str(frame.columns[c]), value=values[r, c],
                    )
    return out


def ingest(
    feature_paths: Mapping[str, PathLike],
    covariates_path: PathLike,
    labels_path: PathLike,
    covariate_layout: Optional[CovariateLayout] = None,
) -> Tuple[MultimodalBatch, DatasetHeader]:
    """
    Read and align modality files, covariates and labels

    Returns:
        Batch ordered by subject id, and the dataset header

    Raises:
        IngestError: a subject is missing from some file
            or a cohort tag is outside the vocabulary
        ParseError: a cell is not numeric (row/column reported)
            or a file is not well-formed CSV
    """
    layout = covariate_layout or default_covariate_layout()
    tables = {m: _read_table(Path(p)) for m, p in feature_paths.items()}
    covariates = _read_table(Path(covariates_path), required=("age", "sex"))
    labels = _read_table(Path(labels_path), required=("cohort",))

    sources = {**{f"features[{m}]": t for m, t in tables.items()}, "covariates": covariates, "labels": labels}
    all_ids = sorted(set().union(*(set(t.index) for t in sources.values())))
    missing = {
        name: sorted(set(all_ids) - set(t.index)) for name, t in sources.items() if len(t.index) != len(all_ids)
    }
    if missing:
        raise IngestError("subjects missing from some inputs", missing=missing)
    check_cohort_tags(labels["cohort"], Path(labels_path))

    features = {m: _to_float(t.loc[all_ids], Path(feature_paths[m])) for m, t in tables.items()}
    ages = _to_float(covariates.loc[all_ids, ["age"]], Path(covariates_path)).ravel()
    sexes = tuple(covariates.loc[all_ids, "sex"].tolist())
    batch = MultimodalBatch(
        subject_ids=tuple(all_ids),
        features=features,
        covariates=encode_covariates(ages, sexes, layout),
        cohorts=tuple(labels.loc[all_ids, "cohort"].tolist()),
        ages=ages,
        sexes=sexes,
    )
    header = DatasetHeader(
        modalities=[ModalityHeader(name=m, regions=[str(c) for c in t.columns]) for m, t in tables.items()],
        covariates=layout,
    )
    logger.info("Ingested %d subjects, modalities %s", batch.n_subjects, list(features))
    return batch, header


def load_dataset_dir(data_dir: PathLike) -> Tuple[MultimodalBatch, DatasetHeader]:
    """Ingest a dataset directory; header.json (when present) fixes modality order and covariates"""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise UsageError("data directory does not exist", path=str(data_dir))
    header_path = data_dir / "header.json"
    if header_path.exists():
        header = DatasetHeader.model_validate_json(header_path.read_text(encoding="utf-8"))
        names = header.modality_names
        layout = header.covariates
    else:
        names = sorted(p.stem[len(FEATURE_PREFIX):] for p in data_dir.glob(f"{FEATURE_PREFIX}*.csv"))
        layout = default_covariate_layout()
    if not names:
        raise IngestError("no feature files found", path=str(data_dir))
    return ingest(
        {m: data_dir / f"{FEATURE_PREFIX}{m}.csv" for m in names},
        data_dir / "covariates.csv",
        data_dir / "labels.csv",
        layout,
    )


def write_dataset(batch: MultimodalBatch, header: DatasetHeader, out_dir: PathLike) -> List[Path]:
    """Emit the CSV files and header of a dataset directory"""
    out_dir = Path(out_dir)
    ids = list(batch.subject_ids)
    paths = []
    for mod in header.modalities:
        frame = pd.DataFrame(batch.features[mod.name], columns=mod.regions)
        frame.insert(0, SUBJECT_COLUMN, ids)
        paths.append(atomic_write_csv(out_dir / f"{FEATURE_PREFIX}{mod.name}.csv", frame))
    covariates = pd.DataFrame({SUBJECT_COLUMN: ids, "age": batch.ages, "sex": list(batch.sexes)})
    paths.append(atomic_write_csv(out_dir / "covariates.csv", covariates))
    labels = pd.DataFrame({SUBJECT_COLUMN: ids, "cohort": list(batch.cohorts)})
    paths.append(atomic_write_csv(out_dir / "labels.csv", labels))
    paths.append(atomic_write_text(out_dir / "header.json", header.model_dump_json(indent=2) + "\n"))
    return paths


# Synthetic cohort
def region_names(spec: SynthSpec) -> List[str]:
    return [f"ctx_{i + 1:02d}" for i in range(spec.n_cortical)] + [
        f"sub_{i + 1:02d}" for i in range(spec.n_subcortical)
    ]


def planted_regions(spec: SynthSpec) -> List[str]:
    """Regions that carry the stage shift in every modality"""
    return region_names(spec)[: spec.shifted_regions]


def simulate(spec: SynthSpec, covariate_layout: Optional[CovariateLayout] = None) -> Tuple[MultimodalBatch, DatasetHeader]:
    """
    Draw all cohorts from a shared latent factor model

    Every modality is offset + scale * (f @ L_m + covariate effects + noise),
    with f ~ N(0, I) shared across modalities. Stage cohorts add
    sign_m * shift_stage to the first `shifted_regions` regions.
    """
    layout = covariate_layout or default_covariate_layout()
    rng = np.random.default_rng(spec.seed)
    regions = region_names(spec)
    n_regions = len(regions)
    F = spec.latent_factors

    model = {}
    for m in spec.modality_names:
        model[m] = {
            "loadings": rng.normal(0.0, 1.0 / np.sqrt(F), size=(F, n_regions)),
            "offset": rng.uniform(1.0, 5.0, size=n_regions),
            "scale": rng.uniform(0.5, 2.0, size=n_regions),
            "age": spec.age_effect * rng.normal(size=n_regions),
            "sex": spec.sex_effect * rng.normal(size=n_regions),
        }

    cohorts = [(settings.REFERENCE_TAG, spec.n_reference, 0.0), (settings.HOLDOUT_TAG, spec.n_holdout, 0.0)]
    cohorts += list(zip(spec.stage_tags, spec.stage_sizes, spec.stage_shifts))
    total = sum(n for _, n, _ in cohorts)
    width = max(5, len(str(total)))
    lo, hi = spec.age_range
    mid, half = (lo + hi) / 2.0, (hi - lo) / 2.0

    ids: List[str] = []
    tags: List[str] = []
    ages_all, sexes_all = [], []
    feats: Dict[str, List[np.ndarray]] = {m: [] for m in spec.modality_names}
    for tag, n, shift in cohorts:
        ages = rng.uniform(lo, hi, size=n)
        sexes = np.where(rng.uniform(size=n) < spec.p_female, "F", "M")
        factors = rng.normal(size=(n, F))
        age_std = ((ages - mid) / half)[:, None]
        sex_c = ((sexes == "M").astype(np.float64) - 0.5)[:, None]
        for m, sign in zip(spec.modality_names, spec.shift_signs):
            p = model[m]
            signal = factors @ p["loadings"] + age_std * p["age"] + sex_c * p["sex"]
            signal = signal + rng.normal(0.0, spec.noise_sd, size=(n, n_regions))
            signal[:, : spec.shifted_regions] += sign * shift
            feats[m].append(p["offset"] + p["scale"] * signal)
        start = len(ids)
        ids.extend(f"S{start + i + 1:0{width}d}" for i in range(n))
        tags.extend([tag] * n)
        ages_all.append(ages)
        sexes_all.extend(sexes.tolist())

    ages = np.concatenate(ages_all)
    batch = MultimodalBatch(
        subject_ids=tuple(ids),
        features={m: np.vstack(v) for m, v in feats.items()},
        covariates=encode_covariates(ages, sexes_all, layout),
        cohorts=tuple(tags),
        ages=ages,
        sexes=tuple(sexes_all),
    )
    header = DatasetHeader(
        modalities=[ModalityHeader(name=m, regions=regions) for m in spec.modality_names],
        covariates=layout,
    )
    return batch, header


def generate_synthetic(spec: SynthSpec, out_dir: PathLike) -> List[Path]:
    """Write a synthetic dataset directory plus the SynthSpec used, for provenance"""
    batch, header = simulate(spec)
    paths = write_dataset(batch, header, out_dir)
    provenance = {"spec": spec.model_dump(mode="json"), "planted_regions": planted_regions(spec)}
    paths.append(
        atomic_write_text(Path(out_dir) / "synth_spec.json", json.dumps(provenance, indent=2, sort_keys=True) + "\n")
    )
    logger.info("Generated %d synthetic subjects in %s", batch.n_subjects, out_dir)
    return paths
