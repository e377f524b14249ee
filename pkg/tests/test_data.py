import dataclasses
import os

import numpy as np
import pytest

from policyrank import data as D
from policyrank.errors import ContractError, IngestionError

TOY_SCHEMA = """
# toy schema
treatment = treated
gain = revenue
cost = spend
categorical = color
drop = id
"""


def write(path, text):
    path.write_text(text.strip() + "\n")
    return str(path)


def toy_csv(tmp_path, rows=None):
    rows = rows or [
        "id,treated,revenue,spend,color,age,flat",
        "1,1,3.0,1.0,red,20,7",
        "2,0,1.0,0.5,green,35,7",
        "3,1,2.0,0.2,blue,50,7",
        "4,0,0.5,0.1,red,41,7",
        "5,1,1.5,0.3,green,62,7",
        "6,0,0.7,0.2,blue,29,7",
    ]
    return write(tmp_path / "toy.csv", "\n".join(rows))


def test_one_hot_grows_width(tmp_path):
    res = D.load_csv(toy_csv(tmp_path), D.SchemaConfig.parse(TOY_SCHEMA))
    # age, flat + 3 colour levels
    assert res.dataset.d == 5
    assert {"color=red", "color=green", "color=blue"} <= set(res.dataset.feature_names)
    assert res.report["rows_kept"] == 6


def test_constant_column_divides_by_one(tmp_path):
    res = D.load_csv(toy_csv(tmp_path), D.SchemaConfig.parse(TOY_SCHEMA))
    j = res.dataset.feature_names.index("flat")
    assert res.report["constant_columns"] == ["flat"]
    np.testing.assert_array_equal(res.dataset.x[:, j], 0.0)


def test_normalisation_uses_training_split_only(tmp_path, rng):
    lines = ["id,treated,revenue,spend,age"]
    for i in range(200):
        lines.append(f"{i},{i % 2},{rng.normal()},{rng.normal()},{rng.normal(50, 10)}")
    res = D.load_csv(write(tmp_path / "t.csv", "\n".join(lines)),
                     D.SchemaConfig(treatment="treated", gain="revenue", cost="spend", drop=["id"]), seed=4)
    raw = np.array([float(l.split(",")[4]) for l in lines[1:]])
    train = raw[res.split.train]
    expected = (raw - train.mean()) / train.std()
    np.testing.assert_allclose(res.dataset.x[:, 0], expected, rtol=1e-12)
    z_train = res.dataset.x[res.split.train, 0]
    assert abs(z_train.mean()) < 1e-12 and abs(z_train.std() - 1) < 1e-12


def test_filters_and_report(tmp_path):
    schema = D.SchemaConfig.parse(TOY_SCHEMA + "filter = age < 55\n")
    res = D.load_csv(toy_csv(tmp_path), schema)
    assert res.report["rows_kept"] == 5
    assert res.report["dropped"] == {"age < 55": 1}


def test_missing_column_is_named(tmp_path):
    schema = D.SchemaConfig(treatment="treated", gain="nope", cost="spend")
    with pytest.raises(IngestionError, match="nope"):
        D.load_csv(toy_csv(tmp_path), schema)


def test_unparsable_cell_names_row_and_column(tmp_path):
    rows = ["treated,revenue,spend,age", "1,3,1,20", "0,1,x,30", "1,2,1,40", "0,1,1,50"]
    with pytest.raises(IngestionError, match=r"row 2, column 'spend'"):
        D.load_csv(toy_csv(tmp_path, rows), D.SchemaConfig(treatment="treated", gain="revenue", cost="spend"))


def test_empty_cohort_is_an_error(tmp_path):
    rows = ["treated,revenue,spend,age", "1,3,1,20", "1,1,1,30", "1,2,1,40", "1,1,1,50", "1,1,1,60"]
    with pytest.raises(IngestionError, match="cohort"):
        D.load_csv(toy_csv(tmp_path, rows), D.SchemaConfig(treatment="treated", gain="revenue", cost="spend"))


def test_missing_file():
    with pytest.raises(IngestionError, match="missing.csv"):
        D.load_csv("missing.csv", D.census_recipe())


def test_intensity_is_zero_for_control(tmp_path):
    rows = ["treated,revenue,spend,dose,age", "1,3,1,2.5,20", "0,1,1,9,30", "1,2,1,1.0,40", "0,1,1,4,50",
            "1,2,2,0.5,44"]
    schema = D.SchemaConfig(treatment="treated", gain="revenue", cost="spend", intensity="dose")
    ds = D.load_csv(toy_csv(tmp_path, rows), schema).dataset
    np.testing.assert_array_equal(ds.rho, [2.5, 0, 1.0, 0, 0.5])


def census_rows():
    header = "caseid,dHours,dIncome1,iFertil,iCitizen,dAge,iSex"
    body = [
        "1,4,3,2,0,3,1",
        "2,1,1,3,0,2,0",
        "3,5,2,2,1,3,1",   # iCitizen = 1: dropped
        "4,2,2,1,0,3,0",   # iFertil = 1 < 1.5: dropped
        "5,3,4,4,0,6,1",   # dAge = 6: dropped
        "6,3,1,2,0,1,0",
        "7,2,0,5,0,4,1",
        "8,6,3,2,0,2,0",
    ]
    return [header] + body


def test_census_recipe_filters_and_roles(tmp_path):
    res = D.load_csv(toy_csv(tmp_path, census_rows()), D.census_recipe())
    ds = res.dataset
    assert ds.n == 5
    assert res.report["dropped"] == {"iFertil >= 1.5": 1, "iCitizen == 0": 1, "dAge < 5": 1}
    # hours among kept rows: 4,1,3,2,6 -> median 3, strictly above is treated
    np.testing.assert_array_equal(ds.treatment, [1, 0, 0, 0, 1])
    np.testing.assert_array_equal(ds.y_c, [-2, -3, -2, -5, -2])
    np.testing.assert_array_equal(ds.y_r, [3, 1, 1, 0, 3])
    assert "caseid" not in ds.feature_names and "dHours" not in ds.feature_names


def test_census_median_split_sizes(rng, tmp_path):
    lines = [census_rows()[0]]
    hours = rng.permutation(101)
    for i in range(101):
        lines.append(f"{i},{hours[i]},{rng.normal()},2,0,1,{i % 2}")
    ds = D.load_csv(write(tmp_path / "c.csv", "\n".join(lines)), D.census_recipe()).dataset
    # 101 distinct hours: 50 lie strictly above the median
    assert ds.n_treated == 50


def covtype_rows():
    header = ("Elevation,Horizontal_Distance_To_Hydrology,Vertical_Distance_To_Hydrology,"
              "Horizontal_Distance_To_Fire_Points,Cover_Type")
    body = ["100,10,1,500,1", "110,30,2,100,2", "120,20,3,300,1", "130,40,4,200,2", "140,50,5,50,3",
            "150,15,6,400,2", "160,35,7,150,1"]
    return [header] + body


def test_covtype_recipe(tmp_path):
    ds = D.load_csv(toy_csv(tmp_path, covtype_rows()), D.covtype_recipe()).dataset
    assert ds.n == 6  # cover type 3 filtered out
    # hydrology 10,30,20,40,15,35 -> median 25, strictly below is treated
    np.testing.assert_array_equal(ds.treatment, [1, 0, 1, 0, 1, 0])
    np.testing.assert_array_equal(ds.y_c, [0, 1, 0, 1, 1, 0])  # Spruce-Fir costs 0
    # fire points 500,100,300,200,400,150 -> median 250
    np.testing.assert_array_equal(ds.y_r, [0, 1, 0, 1, 0, 1])
    assert ds.feature_names == ["Elevation"]


def test_covtype_row_at_median_is_control(tmp_path):
    rows = covtype_rows()[:1] + ["1,10,1,5,1", "1,20,1,5,2", "1,30,1,6,1", "1,5,1,6,1", "1,40,1,6,2"]
    ds = D.load_csv(toy_csv(tmp_path, rows), D.covtype_recipe()).dataset
    # median hydrology is 20; the row at 20 goes to control
    np.testing.assert_array_equal(ds.treatment, [1, 0, 0, 1, 0])


def test_schema_parse_errors():
    with pytest.raises(IngestionError, match="cost"):
        D.SchemaConfig.parse("treatment = t\ngain = g\n")
    with pytest.raises(IngestionError, match="unknown key"):
        D.SchemaConfig.parse("treatment = t\ngain = g\ncost = c\ncolour = x\n")
    with pytest.raises(IngestionError):
        D.SchemaConfig.parse("treatment = t\ngain = g\ncost = c\nfilter = a >=\n")
    with pytest.raises(IngestionError):
        D.SchemaConfig(treatment="t", gain="g", cost="c", gain_rule="sometimes")


def test_schema_file_round_trip(tmp_path):
    path = write(tmp_path / "s.schema", TOY_SCHEMA + "filter = age >= 1.5\ngain_rule = above_median\n")
    s = D.SchemaConfig.from_file(path)
    assert s.filters == [("age", ">=", 1.5)] and s.categorical == ["color"] and s.gain_rule == "above_median"


def test_dataset_save_load_identical(tmp_path, ponpare_data):
    data, _ = ponpare_data
    a = tmp_path / "a.csv"
    data.save(a)
    loaded = D.CohortDataset.load(a)
    for f in ("x", "treatment", "rho", "y_r", "y_c", "t_a", "item_x"):
        np.testing.assert_array_equal(getattr(loaded, f), getattr(data, f))
    assert loaded.n_classes == data.n_classes and loaded.feature_names == data.feature_names
    b = tmp_path / "b.csv"
    loaded.save(b)
    assert a.read_bytes() == b.read_bytes()


def test_ingest_then_cache_is_idempotent(tmp_path):
    res = D.load_csv(toy_csv(tmp_path), D.SchemaConfig.parse(TOY_SCHEMA))
    p = tmp_path / "cache.csv"
    res.dataset.save(p)
    again = D.CohortDataset.load(p)
    np.testing.assert_array_equal(again.x, res.dataset.x)
    assert again.feature_names == res.dataset.feature_names


def test_load_rejects_foreign_file(tmp_path):
    with pytest.raises(IngestionError):
        D.CohortDataset.load(write(tmp_path / "x.csv", "a,b\n1,2"))


def test_dataset_invariants():
    x = np.zeros((4, 2))
    with pytest.raises(ContractError):
        D.CohortDataset(x, [1, 0, 1, 0], [1.0, 1.0, 1.0, 0.0], np.zeros(4), np.zeros(4))
    with pytest.raises(ContractError):
        D.CohortDataset(x, [1, 1, 1, 1], np.zeros(4), np.zeros(4), np.zeros(4))
    with pytest.raises(ContractError):
        D.CohortDataset(x, [1, 0, 1, 0], np.zeros(4), np.array([0, np.inf, 0, 0]), np.zeros(4))


def test_split_sizes_and_stratification(rng):
    t = (rng.random(1000) < 0.37).astype(int)
    sp = D.split_3_1_1(t, seed=2)
    assert (len(sp.train), len(sp.validation), len(sp.test)) == (600, 200, 200)
    allidx = np.concatenate([sp.train, sp.validation, sp.test])
    assert len(np.unique(allidx)) == 1000
    for part in (sp.train, sp.validation, sp.test):
        assert abs(t[part].sum() - t.mean() * len(part)) <= 1
    again = D.split_3_1_1(t, seed=2)
    np.testing.assert_array_equal(again.test, sp.test)


def test_split_files_round_trip(tmp_path, rng):
    sp = D.split_3_1_1(rng.integers(0, 2, 50), seed=0)
    sp.save(tmp_path / "split")
    back = D.Split.load(tmp_path / "split")
    np.testing.assert_array_equal(back.validation, sp.validation)
    assert (tmp_path / "split" / "train.idx").read_text().count("\n") == 30


def test_split_needs_five_rows():
    with pytest.raises(ContractError):
        D.split_3_1_1([1, 0, 1, 0])


def test_synth_constant_effect_difference_in_means_is_exact():
    spec = D.SynthSpec(n=2000, gain_het=0, intensity_effect=0, baseline=0, noise=0, seed=9)
    data, truth = D.synth_generate(spec)
    t = data.treatment == 1
    assert data.y_r[t].mean() - data.y_r[~t].mean() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_array_equal(truth.tau_r, 1.0)


def test_synth_large_sample_difference_in_means():
    spec = D.SynthSpec(n=1_000_000, noise=0, seed=0)
    data, truth = D.synth_generate(spec)
    t = data.treatment == 1
    dim = data.y_r[t].mean() - data.y_r[~t].mean()
    # with noise=0 the remaining error is covariate imbalance between the
    # cohorts; its standard deviation is sd(y) * sqrt(1/n_t + 1/n_c)
    sd = np.sqrt(np.var(data.y_r[t]) / t.sum() + np.var(data.y_r[~t]) / (~t).sum())
    assert abs(dim - truth.tau_r.mean()) < 4 * sd
    assert sd < 3e-3


def test_synth_outputs_and_determinism():
    a, ta = D.synth_generate(D.SynthSpec(n=500, seed=1))
    b, tb = D.synth_generate(D.SynthSpec(n=500, seed=1))
    np.testing.assert_array_equal(a.y_r, b.y_r)
    np.testing.assert_array_equal(ta.tau_c, tb.tau_c)
    assert np.all(ta.tau_c > 0)
    assert np.all(a.rho[a.treatment == 0] == 0) and np.all(a.rho >= 0)


def test_ponpare_like_preset_has_policy_columns():
    data, _ = D.synth_generate(dataclasses.replace(D.PRESETS["ponpare-like"], n=300))
    assert data.d == 50 and data.item_x.shape[1] == 160 and data.n_classes == 8
    t = data.treatment == 1
    assert np.all(data.t_a[~t] == -1) and data.t_a[t].min() >= 0 and data.t_a[t].max() < 8
    assert np.any(data.rho[t] > 0)


def test_expected_match_closed_form_matches_monte_carlo(rng):
    prefs = rng.normal(size=(3, 4))
    draws = np.argmax(prefs[:, None, :] + rng.gumbel(size=(3, 200_000, 4)), axis=2)
    mc = np.take_along_axis(np.repeat(prefs[:, None, :], 200_000, 1), draws[..., None], 2)[..., 0].mean(1)
    np.testing.assert_allclose(D._expected_match(prefs), mc, atol=0.01)


def test_synth_spec_contract():
    with pytest.raises(ContractError):
        D.SynthSpec(n=10)
    with pytest.raises(ContractError):
        D.SynthSpec(propensity="weird")


def test_ground_truth_file(tmp_path):
    data, truth = D.synth_generate(D.SynthSpec(n=200))
    truth.save(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "tau_r,tau_c,propensity" and len(lines) == 201
