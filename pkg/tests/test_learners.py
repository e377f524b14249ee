import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from policyrank import diffcore as dc
from policyrank import learners as L
from policyrank.data import SynthSpec, split_3_1_1, synth_generate
from policyrank.errors import ContractError
from policyrank.objectives import BarrierConfig, tau_hat


def quick(**kw):
    return L.TrainConfig(**{"iterations": 40, "lr": 0.01, "eval_every": 0, **kw})


# ---------------------------------------------------------------------------
# batching and the shared loop
# ---------------------------------------------------------------------------

def test_stratified_batches_cover_each_row_once(rng):
    t = (rng.random(1003) < 0.3).astype(int)
    batches = list(L.stratified_batches(t, 100, rng))
    allrows = np.concatenate(batches)
    assert len(allrows) == 1003 and len(np.unique(allrows)) == 1003
    for b in batches:
        assert 0 < t[b].sum() < len(b)
        assert abs(t[b].mean() - t.mean()) < 0.05


def test_stratified_batches_need_both_cohorts(rng):
    with pytest.raises(ContractError):
        list(L.stratified_batches(np.ones(10), 4, rng))


def test_config_contract():
    with pytest.raises(ContractError):
        L.TrainConfig(batch_size=1)
    with pytest.raises(ContractError):
        L.TrainConfig(propensity="sometimes")
    assert L.DRM_DEFAULTS.iterations == 1500 and L.DRM_DEFAULTS.lr == 0.001
    assert L.SCPM_DEFAULTS.batch_size == 8000 and L.SCPM_DEFAULTS.hidden == 32


# ---------------------------------------------------------------------------
# DRM and constrained ranking
# ---------------------------------------------------------------------------

def test_drm_zero_init_is_difference_of_means(small_data):
    data, _ = small_data
    model = L.drm_scorer(data.d)
    assert np.all(model.params == 0)
    _, info = L.drm_objective(model.params, model, data, L.TrainConfig())
    t = data.treatment == 1
    assert info["tau_r"] == pytest.approx(data.y_r[t].mean() - data.y_r[~t].mean(), abs=1e-12)
    assert info["tau_c"] == pytest.approx(data.y_c[t].mean() - data.y_c[~t].mean(), abs=1e-12)


def test_drm_is_deterministic(small_data):
    data, _ = small_data
    a = L.train_drm(data, quick(seed=7, batch_size=128))
    b = L.train_drm(data, quick(seed=7, batch_size=128))
    np.testing.assert_array_equal(a.models["scorer"].params, b.models["scorer"].params)
    assert [r["objective"] for r in a.log] == [r["objective"] for r in b.log]


def test_drm_objective_increases(small_data):
    data, _ = small_data
    trained = L.train_drm(data, quick(iterations=200))
    objs = [r["objective"] for r in trained.log]
    assert np.mean(objs[-20:]) > objs[0]


def test_validation_selection_records_step(small_data):
    data, _ = small_data
    sp = split_3_1_1(data.treatment, seed=0)
    trained = L.train_drm(data.subset(sp.train), quick(iterations=60, eval_every=20),
                          validation=data.subset(sp.validation))
    assert trained.meta["selected_step"] in (20, 40, 60)
    assert 0 <= trained.meta["val_aucc"] <= 1.5


def test_checkpoint_round_trip(tmp_path, small_data):
    data, _ = small_data
    trained = L.train_drm(data, quick())
    trained.save(tmp_path / "m.ckpt")
    back = L.TrainedModel.load(tmp_path / "m.ckpt")
    assert back.kind == "drm"
    np.testing.assert_array_equal(back.score(data.x), trained.score(data.x))


def test_training_log_file(tmp_path, small_data):
    data, _ = small_data
    trained = L.train_constrained(data, quick(iterations=12))
    trained.write_log(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "step,objective,tau_r,tau_c,extra" and len(lines) == 13
    assert "temperature=0.6" in lines[-1]


def test_temperature_schedule():
    b = BarrierConfig(percentage=0.4)
    assert b.temperature_at(35) == pytest.approx(0.8)
    assert b.temperature_at(0) == 0.5 and b.temperature_at(9) == 0.5 and b.temperature_at(10) == 0.6


def test_budget_above_total_cost_matches_drm(small_data):
    data, _ = small_data
    total = np.maximum(data.y_c, 0).sum()
    drm = L.train_drm(data, quick(batch_size=200))
    con = L.train_constrained(data, quick(batch_size=200), barrier=BarrierConfig(budget=total + 1))
    np.testing.assert_array_equal(drm.models["scorer"].params, con.models["scorer"].params)


def test_constrained_concentrates_mass(small_data):
    data, _ = small_data
    barrier = BarrierConfig(percentage=0.4)
    trained = L.train_constrained(data, quick(iterations=300, lr=0.05), barrier=barrier)
    mass = L.barrier_mass(trained, data, barrier, trained.meta["final_temperature"])
    assert mass > 0.8


def test_barrier_skips_tied_batch(small_data):
    data, _ = small_data
    batch = data.subset(np.arange(20))
    model = L.drm_scorer(data.d)
    # zero weights give identical scores, so the cut is a tie
    _, info = L.drm_objective(model.params, model, batch, L.TrainConfig(),
                              barrier=BarrierConfig(percentage=0.4), temperature=1.0)
    assert info["barrier"] == "skipped"


# ---------------------------------------------------------------------------
# SCPM
# ---------------------------------------------------------------------------

def test_scpm_scores_use_prior_only(ponpare_data):
    data, _ = ponpare_data
    trained = L.train_scpm(data, config=quick(batch_size=128, hidden=8, iterations=15))
    assert set(trained.models) == {"prior", "intensity", "assignment"}
    before = trained.score(data.x)
    for kind in ("intensity", "assignment"):
        del trained.models[kind]
    np.testing.assert_array_equal(trained.score(data.x), before)


def test_scpm_is_deterministic(ponpare_data):
    data, _ = ponpare_data
    cfg = quick(batch_size=128, hidden=8, iterations=10, seed=3)
    a = L.train_scpm(data, config=cfg)
    b = L.train_scpm(data, config=cfg)
    np.testing.assert_array_equal(a.score(data.x), b.score(data.x))


def test_scpm_without_signal_is_near_random(small_data):
    data, _ = small_data
    flat = dataclasses.replace(data, y_r=np.ones(data.n))
    sp = split_3_1_1(flat.treatment, seed=0)
    trained = L.train_scpm(flat.subset(sp.train), config=quick(batch_size=128, hidden=8, iterations=30))
    assert all(abs(r["tau_r"]) < 1e-9 for r in trained.log)
    test = flat.subset(sp.test)
    assert abs(L._validation_aucc(trained.score(test.x), test) - 0.5) <= 0.05


def test_default_factors_follow_the_data(small_data, ponpare_data):
    assert [f.kind for f in L.default_factors(small_data[0], 8)] == ["prior", "intensity"]
    assert [f.kind for f in L.default_factors(ponpare_data[0], 8)] == ["prior", "intensity", "assignment"]
    plain = dataclasses.replace(small_data[0], rho=np.zeros(small_data[0].n))
    assert [f.kind for f in L.default_factors(plain, 8)] == ["prior"]


# ---------------------------------------------------------------------------
# propensity
# ---------------------------------------------------------------------------

def test_propensity_random_assignment_is_half(rng):
    x = rng.normal(size=(5000, 4))
    t = rng.integers(0, 2, 5000)
    w = L.fit_propensity(x, t)
    assert np.all(np.abs(w.e - 0.5) < 0.1)


def test_propensity_separable_is_clipped(rng):
    t = np.repeat([0, 1], 50)
    x = (t * 10.0 - 5.0 + rng.normal(scale=0.1, size=100))[:, None]
    w = L.fit_propensity(x, t)
    assert w.e.min() == 0.01 and w.e.max() == 0.99


def test_propensity_overall_share(rng):
    t = np.array([1] * 40 + [0] * 60)
    assert L.fit_propensity(rng.normal(size=(100, 2)), t).e_hat == 0.4


def test_propensity_single_class(rng):
    with pytest.raises(ContractError):
        L.fit_propensity(rng.normal(size=(10, 2)), np.ones(10))


def test_propensity_recovers_logistic_assignment():
    data, truth = synth_generate(SynthSpec(n=20000, propensity="logistic", seed=2))
    w = L.fit_propensity(data.x, data.treatment)
    assert np.mean(np.abs(w.e - truth.propensity)) < 0.05


def test_propensity_log_loss_non_increasing(rng):
    x = rng.normal(size=(500, 3)) * [1, 10, 100]
    t = (rng.random(500) < 1 / (1 + np.exp(-x[:, 0]))).astype(int)
    hist = np.array(L.fit_propensity(x, t, lr=0.01, epochs=300).model.loss_history)
    assert np.all(np.diff(hist) <= 1e-15)


# ---------------------------------------------------------------------------
# ridge R-learner and the duality solver
# ---------------------------------------------------------------------------

def test_rlearner_recovers_planted_effect(rng):
    n, beta = 10000, np.array([1.0, -2.0, 0.5])
    x = rng.normal(size=(n, 3))
    t = rng.integers(0, 2, n)
    y = (x @ beta) * t + rng.normal(scale=0.1, size=n)
    fit = L.fit_rlearner_tau(x, t, y, 0.5)
    assert np.linalg.norm(fit.tau_coef[1:] - beta) / np.linalg.norm(beta) < 0.1


def test_rlearner_null_effect(rng):
    n, d, sigma = 10000, 3, 1.0
    x = rng.normal(size=(n, d))
    t = rng.integers(0, 2, n)
    y = x @ np.ones(d) + rng.normal(scale=sigma, size=n)
    fit = L.fit_rlearner_tau(x, t, y, 0.5)
    # each coefficient has standard error about sigma / (0.5 sqrt n)
    floor = np.sqrt(d + 1) * 2 * sigma / np.sqrt(n)
    assert np.mean(np.abs(fit.predict(x))) < 3 * floor


def test_rlearner_exact_recovery_without_noise(rng):
    # every covariate row appears once treated and once untreated, so the
    # outcome model is exactly half the effect
    base = rng.normal(size=(200, 3))
    x = np.vstack([base, base])
    t = np.repeat([1, 0], 200)
    beta = np.array([0.3, 1.0, -2.0, 0.5])
    y = L._design(x) @ beta * t
    fit = L.fit_rlearner_tau(x, t, y, 0.5, penalty=1e-8)
    np.testing.assert_allclose(fit.tau_coef, beta, atol=1e-6)


def test_rlearner_contract(rng):
    with pytest.raises(ContractError):
        L.fit_rlearner_tau(rng.normal(size=(3, 5)), [1, 0, 1], [1, 2, 3], 0.5)
    with pytest.raises(ContractError):
        L.fit_rlearner_tau(rng.normal(size=(30, 2)), np.arange(30) % 2, np.ones(30), 0.5, penalty=0)


def test_ridge_tau_as_model(rng):
    x = rng.normal(size=(100, 3))
    fit = L.fit_rlearner_tau(x, np.arange(100) % 2, rng.normal(size=100), 0.5)
    np.testing.assert_allclose(fit.to_model().predict(x), fit.predict(x), atol=1e-12)


def test_combined_model_is_linear_in_lambda(small_data):
    data, _ = small_data
    args = (data.x, data.treatment)
    r = L.fit_rlearner_tau(*args, data.y_r, 0.5)
    c = L.fit_rlearner_tau(*args, data.y_c, 0.5)
    e = L.duality_combined_model(*args, data.y_r, data.y_c, 0.05, 0.5)
    np.testing.assert_allclose(e.tau_coef, r.tau_coef - 0.05 * c.tau_coef, atol=1e-8)
    zero = L.duality_combined_model(*args, data.y_r, data.y_c, 0.0, 0.5)
    np.testing.assert_array_equal(zero.tau_coef, r.tau_coef)
    with pytest.raises(ContractError):
        L.duality_combined_model(*args, data.y_r, data.y_c, -1.0, 0.5)


def test_duality_solve_two_item_example():
    state = L.duality_solve([3.0, 1.0], [1.0, 1.0], budget=1.0, alpha=0.1)
    assert state.log[0]["cost"] == 2.0
    np.testing.assert_array_equal(state.z, [1, 0])
    assert state.cost == 1.0 and state.converged
    lams = [row["lam"] for row in state.log]
    assert all(b > a for a, b in zip(lams, lams[1:]))


def test_duality_solve_slack_constraint(rng):
    tr = rng.normal(size=30)
    state = L.duality_solve(tr, -rng.random(30), budget=1.0, alpha=0.1)
    assert state.lam == 0.0 and state.converged
    np.testing.assert_array_equal(state.z, tr >= 0)


def test_duality_solve_descent_sign_moves_lambda_down():
    state = L.duality_solve([3.0, 1.0], [1.0, 1.0], 1.0, 0.1, iters=5, lam0=1.0, update="descent")
    assert state.log[1]["lam"] < 1.0


def test_duality_solve_contract():
    with pytest.raises(ContractError):
        L.duality_solve([1.0], [1.0], budget=0.0, alpha=0.1)
    with pytest.raises(ContractError):
        L.duality_solve([1.0], [1.0], budget=1.0, alpha=0.1, update="sideways")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.9))
def test_duality_lambda_rises_when_over_budget(seed, share):
    rng = np.random.default_rng(seed)
    tr, tc = rng.normal(size=15), rng.uniform(0.1, 1.0, 15)
    state = L.duality_solve(tr, tc, share * tc.sum(), 0.05, iters=200)
    for a, b in zip(state.log, state.log[1:]):
        assert a["lam"] >= 0 and b["lam"] >= 0
        if a["cost"] > state.budget:
            assert b["lam"] > a["lam"]
    assert state.cost <= state.budget or not state.converged


def test_train_duality_selects_from_grid(small_data):
    data, _ = small_data
    sp = split_3_1_1(data.treatment, seed=0)
    trained = L.train_duality(data.subset(sp.train), data.subset(sp.validation))
    assert float(trained.meta["lambda"]) in L.LAMBDA_GRID
    assert len(trained.log) == len(L.LAMBDA_GRID)
    assert trained.score(data.x).shape == (data.n,)


# ---------------------------------------------------------------------------
# gradient checks
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", L.GRADCHECK_KINDS)
def test_gradient_check_passes(kind, small_data, ponpare_data):
    data = ponpare_data[0] if kind == "scpm" else small_data[0]
    report = L.gradient_check(kind, data, rows=20)
    assert report.passed(1e-3), report.max_rel_error
    assert not report.passed(0.0)


def test_gradient_check_budget_barrier(small_data):
    data, _ = small_data
    report = L.gradient_check("constrained", data, barrier=BarrierConfig(budget=3.0), seed=2)
    assert report.passed(1e-3), report.max_rel_error


def test_gradcheck_batch_rows(small_data):
    data, _ = small_data
    batch = L.gradcheck_batch(data, 20)
    assert batch.n == 20 and batch.n_treated == 10
    with pytest.raises(ContractError):
        L.gradcheck_batch(data, 101)


def test_tape_tau_matches_numpy(small_data):
    data, _ = small_data
    p = np.full(data.n, 0.0)
    t = data.treatment == 1
    p[t], p[~t] = 1 / t.sum(), 1 / (~t).sum()
    g = dc.Graph()
    val = tau_hat(g.leaf(p), data.y_r, data.treatment)
    assert float(dc.value_of(val)) == pytest.approx(data.y_r[t].mean() - data.y_r[~t].mean(), abs=1e-12)
