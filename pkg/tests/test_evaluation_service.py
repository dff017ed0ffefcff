"""
Cohort-level evaluation table
"""
import numpy as np
import pandas as pd
import pytest

from mmnorm.services.evaluation_service import METRIC_COLUMNS, attach_labels, evaluate_reports
from mmnorm.utils.errors import ContractError, IngestError


def _report(d_ml, d_mf, method="mopoe", latent_dim=2, n_features=4):
    n = len(d_ml)
    return pd.DataFrame({
        "subject_id": [f"S{i:02d}" for i in range(n)],
        "method": method,
        "latent_dim": latent_dim,
        "n_features": n_features,
        "d_ml": d_ml,
        "d_mf": d_mf,
        "recon_mse": np.arange(n, dtype=float),
    })


def _labels(cohorts):
    return pd.DataFrame({"subject_id": [f"S{i:02d}" for i in range(len(cohorts))], "cohort": cohorts})


@pytest.fixture
def cohort_report():
    # 4 holdout, 2 in stage_1, 2 in stage_2; at p=0.05 with 2 dof a distance above 2.45 is an outlier
    cohorts = ["holdout"] * 4 + ["stage_1"] * 2 + ["stage_2"] * 2
    d_ml = [0.1, 0.2, 3.0, 0.3, 3.0, 0.1, 3.0, 4.0]
    d_mf = [0.5, 0.5, 0.5, 0.5, 9.0, 9.0, 9.0, 9.0]
    return _report(d_ml, d_mf), _labels(cohorts)


def test_table_columns_and_pooled_rows(cohort_report):
    report, labels = cohort_report
    table = evaluate_reports(report, labels, p_levels=[0.05])
    assert list(table.columns) == METRIC_COLUMNS
    lr = table[(table["metric"] == "likelihood_ratio") & (table["score"] == "d_ml")].set_index("stage")
    assert set(lr.index) == {"stage_1", "stage_2", "pooled"}
    # one of four controls flagged: FPR 0.25
    assert lr.loc["stage_1", "value"] == pytest.approx(0.5 / 0.25)
    assert lr.loc["stage_2", "value"] == pytest.approx(1.0 / 0.25)
    assert lr.loc["pooled", "value"] == pytest.approx(0.75 / 0.25)
    assert lr.loc["pooled", "n_disease"] == 4
    assert not lr["corrected"].any()


def test_continuity_correction_is_reported(cohort_report):
    report, labels = cohort_report
    table = evaluate_reports(report, labels, p_levels=[0.05])
    mf = table[(table["metric"] == "likelihood_ratio") & (table["score"] == "d_mf")].set_index("stage")
    # no control outliers for d_mf (4 dof): FPR = 0.5 / 4
    assert mf.loc["pooled", "value"] == pytest.approx(1.0 / 0.125)
    assert mf["corrected"].all()


def test_emd_rows(cohort_report):
    report, labels = cohort_report
    table = evaluate_reports(report, labels, p_levels=[0.05])
    emd = table[(table["metric"] == "emd") & (table["score"] == "d_mf")].set_index("stage")
    assert emd.loc["pooled", "value"] == pytest.approx(8.5)
    assert emd["p_level"].isna().all()


def test_recon_mse_per_cohort(cohort_report):
    report, labels = cohort_report
    table = evaluate_reports(report, labels, p_levels=[0.05])
    mse = table[table["metric"] == "recon_mse"].set_index("stage")["value"]
    assert mse["holdout"] == pytest.approx(1.5)
    assert mse["stage_1"] == pytest.approx(4.5)
    assert mse["stage_2"] == pytest.approx(6.5)


def test_methods_are_evaluated_separately(cohort_report):
    report, labels = cohort_report
    other = report.assign(method="poe", latent_dim=3)
    table = evaluate_reports(pd.concat([report, other], ignore_index=True), labels, p_levels=[0.05, 0.01])
    keys = set(zip(table["method"], table["latent_dim"]))
    assert keys == {("mopoe", 2), ("poe", 3)}
    per_method = table.groupby(["method", "latent_dim"]).size()
    assert per_method.nunique() == 1


def test_clinical_correlation(cohort_report):
    report, labels = cohort_report
    clinical = pd.DataFrame({"subject_id": report["subject_id"], "mmse": 30.0 - report["d_mf"].to_numpy()})
    table = evaluate_reports(report, labels, p_levels=[0.05], clinical=clinical)
    rows = table[table["metric"] == "pearson_mmse"].set_index("score")
    assert rows.loc["d_mf", "value"] == pytest.approx(-1.0)
    assert rows.loc["d_mf", "n_disease"] == 8


def test_constant_clinical_score_gives_nan(cohort_report):
    report, labels = cohort_report
    clinical = pd.DataFrame({"subject_id": report["subject_id"], "cdr": 1.0})
    table = evaluate_reports(report, labels, p_levels=[0.05], clinical=clinical)
    assert table.loc[table["metric"] == "pearson_cdr", "value"].isna().all()


def test_unlabelled_subject_is_an_ingest_error(cohort_report):
    report, labels = cohort_report
    with pytest.raises(IngestError) as info:
        attach_labels(report, labels.iloc[:-1])
    assert info.value.exit_code == 3
    assert "S07" in str(info.value)


def test_no_disease_cohort(cohort_report):
    report, _ = cohort_report
    labels = _labels(["holdout"] * 4 + ["reference"] * 4)
    with pytest.raises(ContractError):
        evaluate_reports(report, labels)
