import json

import pytest

from kdinterp.config import load_run_config
from kdinterp.experiments import ModelStore, exp_logit_plus_at, exp_ls_teacher, exp_trend
from kdinterp.report import dumps, strip_timings

TINY = {
    "seeds": [0, 1, 2],
    "dataset": {"n_train": 120, "n_test": 60, "image_size": 32, "seed": 3},
    "student_widths": [4, 8, 8],
    "teacher_widths": [4, 8, 16],
    "train": {"epochs": 1, "batch_size": 8},
    "entropy_samples": 50,
    "diffroar": {"enabled": True, "fractions": [0.5], "n_seeds": 1, "retrain_epochs": 1},
}


def _cfg(out):
    return load_run_config(None, {**TINY, "output_dir": str(out)})


@pytest.fixture(scope="module")
def trend(tmp_path_factory):
    ModelStore._memo.clear()
    out = tmp_path_factory.mktemp("trend")
    return out, exp_trend(_cfg(out))


def test_trend_schema(trend):
    out, rep = trend
    assert [r["model"] for r in rep["seed_average"]] == ["scratch", "kd", "ls"]
    assert [p["seed"] for p in rep["per_seed"]] == [0, 1, 2]
    assert list(rep)[-1] == "timings"
    assert rep["config"] == _cfg(out).to_dict()
    for row in rep["seed_average"]:
        assert {"total_detectors", "unique_detectors", "accuracy", "five_band", "entropy_entire", "entropy_category"} <= set(row)
        assert set(row["five_band"]) == {"pixel_acc", "recall", "precision", "fpr"}
    assert all(isinstance(v, bool) for v in rep["flags"].values())
    assert {"diffroar_null_within_2pp", "diffroar_kd_ge_scratch_minus_1pp", "five_band_kd_ge_scratch"} <= set(rep["flags"])
    assert (out / "trend_report.json").read_text() == dumps(rep)


def test_trend_rerun_is_byte_identical_modulo_timings(trend, tmp_path):
    out, _ = trend
    ModelStore._memo.clear()
    exp_trend(_cfg(tmp_path))
    a = strip_timings(json.loads((out / "trend_report.json").read_text()))
    b = strip_timings(json.loads((tmp_path / "trend_report.json").read_text()))
    a["config"].pop("output_dir"), b["config"].pop("output_dir")
    assert a == b


def test_other_experiments_schema(tmp_path):
    ls = exp_ls_teacher(_cfg(tmp_path))
    assert [r["temperature"] for r in ls["seed_average"]] == [1.0, 2.0, 4.0]
    assert "detectors_T4_ge_T1" in ls["flags"]
    at = exp_logit_plus_at(_cfg(tmp_path))
    assert [r["model"] for r in at["seed_average"]] == ["at_only", "at_plus_logit"]
    assert "detectors_at_plus_logit_ge_at_only" in at["flags"]
