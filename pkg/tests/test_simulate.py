import dataclasses
import json

import numpy as np
import pandas as pd
import pytest

from logcausal.core_data import (CATEGORICAL_COVARIATES, LOG_COLUMNS, STUDENT_COLUMNS, design_matrix, ingest_log,
                                 ingest_students)
from logcausal.effects import matched_set_effects, weighted_effect
from logcausal.matching import full_match
from logcausal.measurement import RASCH_SAMPLER, challenge_filter, fit_rasch_mixture
from logcausal.principal_strat import PS_SAMPLER, PSData, fit_ps
from logcausal.simulate import TruthConfig, simulate_dataset, truth_config_from_dict


class TestTruthConfig:
    def test_needs_two_schools(self):
        with pytest.raises(ValueError, match="2 schools"):
            TruthConfig(n_schools=1)

    @pytest.mark.parametrize("key", ["sigma_eta", "delta_sd"])
    def test_degenerate_scale(self, key):
        with pytest.raises(ValueError, match="positive"):
            TruthConfig(**{key: 0.0})

    def test_negative_noise(self):
        with pytest.raises(ValueError, match="non-negative"):
            TruthConfig(sigma_y=(0.5, -0.1))

    def test_mixture_mean_zero(self):
        c = TruthConfig(p0=0.65, mu0=-0.8)
        assert c.p0 * c.mu0 + (1 - c.p0) * c.mu1 == pytest.approx(0, abs=1e-15)

    def test_from_strings(self):
        c = truth_config_from_dict({"n_schools": "6", "p0": "0.6", "sigma_y": "0.5, 0.4"})
        assert (c.n_schools, c.p0, c.sigma_y) == (6, 0.6, (0.5, 0.4))
        with pytest.raises(ValueError, match="unknown"):
            truth_config_from_dict({"n_school": 3})


class TestDataset:
    @pytest.fixture(scope="class")
    def ds(self, tmp_path_factory):
        return simulate_dataset(TruthConfig(n_schools=7, seed=3), out_dir=tmp_path_factory.mktemp("sim"))

    def test_columns(self, ds):
        assert list(ds.students.columns) == STUDENT_COLUMNS
        assert list(ds.log.columns) == LOG_COLUMNS

    def test_files_ingest(self, ds):
        aset = ingest_students(ds.paths["students"])
        assert aset.n_students == len(ds.students)
        np.testing.assert_array_equal(aset.students["y"].to_numpy(), ds.students["y"].to_numpy())
        problems, rep = ingest_log(ds.paths["log"], aset, min_section_students=1)
        assert len(problems) == len(ds.log)
        assert set(problems.student_id) == set(ds.students.student_id[ds.students.z == 1])

    def test_blocks_randomized(self, ds):
        s = ds.students
        assert (s.groupby("block_id").z.nunique() == 2).all()
        assert (s.groupby("school_id").z.nunique() == 1).all()
        # odd school count leaves one block of three
        assert sorted(s.groupby("block_id").school_id.nunique().tolist()) == [2, 2, 3]

    def test_truth_record(self, ds):
        rec = json.load(open(ds.paths["truth"]))
        assert rec["n_schools"] == 7 and len(rec["delta"]) == ds.config.n_sections
        t = pd.read_csv(ds.paths["truth_students"], float_precision="round_trip")
        np.testing.assert_array_equal(t.eta.to_numpy(), ds.truth.eta.to_numpy())

    def test_deterministic(self, ds):
        again = simulate_dataset(TruthConfig(n_schools=7, seed=3))
        pd.testing.assert_frame_equal(again.students, ds.students)
        pd.testing.assert_frame_equal(again.log, ds.log)

    def test_class_share(self):
        ds = simulate_dataset(n_schools=40, students_per_school=100, n_sections=2, problems_per_section=1, seed=5)
        assert ds.truth.high.mean() == pytest.approx(0.3, abs=0.02)
        # the class is predictable from pretest
        assert np.corrcoef(ds.truth.high, ds.students.pretest)[0, 1] > 0.1


def test_noiseless_h_effect():
    ds = simulate_dataset(n_schools=6, students_per_school=24, seed=1, b0=0.0, b1=0.0, a1=0.0, beta_pretest=0.0,
                          h_effect=0.5, sd_pair=0.0, sd_school_y=0.0, sd_teacher_y=0.0, sigma_y=(0.0, 0.0),
                          missing_y_rate=0.0)
    s = ds.students.merge(ds.truth, on="student_id")
    tr = s[s.z == 1].set_index("student_id")
    ma = full_match(tr.pretest, tr.high, tr.school_id)
    se = matched_set_effects(ma.match_id, tr.y.loc[ma.match_id.index], tr.high.loc[ma.match_id.index])
    pairs = se.table[(se.table.n1 == 1) & (se.table.n0 == 1)]
    assert len(pairs) >= 1
    np.testing.assert_allclose(pairs.tau, 0.5, atol=1e-12)
    np.testing.assert_allclose(se.table.tau, 0.5, atol=1e-12)
    assert weighted_effect(se, "ATE").estimate == pytest.approx(0.5, abs=1e-12)


@pytest.mark.slow
def test_p0_recovered_by_measurement():
    # 2000 treated students: the realized class share alone has sd 0.01
    ds = simulate_dataset(n_schools=40, students_per_school=100, n_sections=30, problems_per_section=3,
                          challenge_rate=0.9, p0=0.7, seed=11)
    fit = fit_rasch_mixture(challenge_filter(ds.log), RASCH_SAMPLER)
    assert fit.valid
    assert abs(fit.p0_mean - 0.7) < 0.05


@pytest.mark.slow
def test_null_slope_calibrated():
    ds = simulate_dataset(n_schools=40, students_per_school=30, b1=0.0, seed=12)
    ch = challenge_filter(ds.log)
    s = ds.students.dropna(subset=["y"]).reset_index(drop=True)
    X = design_matrix(s[CATEGORICAL_COVARIATES].fillna("na").assign(pretest=s.pretest))
    # the a1/b1 direction mixes slowly; the bundled demo uses the same length
    fit = fit_ps(PSData.build(s, X, ch), dataclasses.replace(PS_SAMPLER, iters=4000))
    assert fit.valid
    p = float(np.mean(fit.flat("b1") > 0))
    assert 0.2 <= p <= 0.8
