import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from esmc.errors import ConfigError, InputError
from esmc.evaluation import (SWEEP_COLUMNS, MetricsReport, SingleClassError, SubsetMetrics, auc,
                             case_groups, case_split_eval, evaluate, summarize, sweep, sweep_table)
from esmc.models import ModelConfig, Variant, build_model
from esmc.samples import NO_ORIGIN, calibrate
from esmc.simulator import ground_truth_probabilities, preset, simulate, to_samples
from esmc.training import TrainConfig
from oracles import brute_auc


def test_auc_worked_examples():
    assert auc([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]) == 0.75
    assert auc([0.9, 0.4, 0.6, 0.2], [1, 1, 0, 0]) == 0.75


def test_auc_all_tied():
    assert auc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    assert auc([0.3] * 6, [1, 0, 1, 0, 0, 1], strict=True) == 0.0


def test_auc_separated():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0]) == 0.0


@pytest.mark.parametrize("labels", [[1, 1, 1], [0, 0], []])
def test_auc_single_class(labels):
    with pytest.raises(SingleClassError):
        auc(np.zeros(len(labels)), labels)


def test_auc_input_errors():
    with pytest.raises(InputError):
        auc([0.1, 0.2], [1])
    with pytest.raises(InputError):
        auc([0.1, np.nan], [1, 0])
    with pytest.raises(InputError):
        auc([0.1, 0.2], [1, 2])


@st.composite
def scored(draw):
    n = draw(st.integers(2, 200))
    labels = draw(st.lists(st.integers(0, 1), min_size=n, max_size=n).filter(lambda l: 0 < sum(l) < len(l)))
    # a coarse grid of values forces plenty of ties
    scores = draw(st.lists(st.integers(0, draw(st.integers(1, 20))), min_size=n, max_size=n))
    return np.array(scores, dtype=float) / 7.0, np.array(labels)


@given(scored(), st.booleans())
def test_auc_matches_brute_force(case, strict):
    s, y = case
    assert abs(auc(s, y, strict) - brute_auc(s, y, strict)) <= 1e-12


@given(scored())
def test_auc_monotone_invariance_and_flip(case):
    s, y = case
    base = auc(s, y)
    assert auc(np.exp(3 * s) + 1, y) == base
    assert abs(auc(s, y) + auc(-s, y) - 1.0) <= 1e-12
    # strict AUC of s plus strict AUC of -s misses exactly the tie mass
    ties = 2 * (base - auc(s, y, strict=True))
    assert abs(auc(s, y, True) + auc(-s, y, True) + ties - 1.0) <= 1e-12


def test_auc_null_scores_near_half():
    rng = np.random.default_rng(0)
    assert abs(auc(rng.random(10_000), rng.integers(0, 2, 10_000)) - 0.5) < 0.02


def test_ground_truth_scores_rank_above_chance():
    cfg = preset("default", n_users=300)
    s = to_samples(simulate(cfg, 0))
    pc, pa, pb = ground_truth_probabilities(cfg, s.user, s.item)
    assert auc(pc, s.c) > 0.5
    clicked = s.c == 1
    assert auc(pa[clicked], s.a[clicked]) > 0.5
    assert auc((pa * pb)[clicked], s.o[clicked]) > 0.5
    assert auc(pc * pa * pb, s.c * s.o) > 0.5


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def tiny_model(schema, variant=Variant.ESMC, seed=0):
    return build_model(ModelConfig(variant, tower_hidden=(8,), bottom_hidden=(8,), head_hidden=(4,),
                                   seed=seed), schema)


def test_evaluate_matches_direct_auc(small_raw):
    test, _ = calibrate(small_raw)
    m = tiny_model(test.schema)
    rep = evaluate(m, test)
    b = m.predict(test.feats)
    clicked = test.c == 1
    assert rep.ctr_auc == auc(b.ctr, test.c)
    assert rep.ctcvr_auc == auc(b.ctcvr, test.c * test.o)
    assert rep.cvr_auc == auc(b.cvr[clicked], test.o[clicked])
    assert rep.n_samples == len(test) and rep.variant == "esmc"


def test_chained_cvr_is_post_click(small_raw):
    test, _ = calibrate(small_raw)
    m = tiny_model(test.schema, Variant.ESMM2)
    b = m.predict(test.feats)
    clicked = test.c == 1
    assert evaluate(m, test).cvr_auc == auc((b.car * b.cvr)[clicked], test.o[clicked])


def test_no_clicks_gives_none(small_raw):
    test, _ = calibrate(small_raw)
    none_clicked = test.take(np.flatnonzero(test.c == 0))
    rep = evaluate(tiny_model(test.schema), none_clicked)
    assert rep.cvr_auc is None and rep.ctr_auc is None
    assert "n/a" in rep.table()


def test_report_json_roundtrip(small_raw):
    test, _ = calibrate(small_raw)
    rep = case_split_eval(tiny_model(test.schema), test)
    back = MetricsReport.from_dict(json.loads(rep.to_json()))
    assert back == rep
    assert isinstance(back.subsets["bad_case"], SubsetMetrics)


def test_case_groups_partition_conversions(small_raw):
    test, _ = calibrate(small_raw)
    groups = case_groups(test)
    (gp, gn), (bp, bn) = groups["good_case"], groups["bad_case"]
    conv = np.flatnonzero(test.o == 1)
    assert np.array_equal(np.sort(np.concatenate([gp, bp])), conv)
    assert np.all(test.cart_origin[bp] != NO_ORIGIN)
    assert bp.size > 0 and gp.size > 0
    for pos, neg in ((gp, gn), (bp, bn)):
        assert np.all((test.c[neg] == 1) & (test.o[neg] == 0))
        visits = set(zip(test.user[pos].tolist(), test.session[pos].tolist()))
        assert set(zip(test.user[neg].tolist(), test.session[neg].tolist())) <= visits


@pytest.mark.parametrize("rho, empty", [(0.0, "bad_case"), (1.0, "good_case")])
def test_case_split_extremes(rho, empty):
    # with few clicks and many items every deferred purchase finds a later visit;
    # carts of the final visit cannot move, so that visit is dropped
    cfg = preset("default", n_users=300, n_items=5000, deferred_purchase_rate=rho, affinity_dim=0,
                 base_click_prob=0.1, cart_given_click_prob=0.5)
    raw = to_samples(simulate(cfg, 0))
    raw = raw.take(np.flatnonzero(raw.session < cfg.n_sessions_per_user - 1))
    test, _ = calibrate(raw)
    rep = case_split_eval(tiny_model(test.schema), test)
    assert rep.subsets[empty].n == 0 and rep.subset_auc(empty) is None
    other = "good_case" if empty == "bad_case" else "bad_case"
    assert rep.subsets[other].n_pos > 0
    assert rep.notes


def test_case_group_sizes_follow_rho():
    rho = 0.3
    cfg = preset("default", n_users=1500, n_items=5000, deferred_purchase_rate=rho, affinity_dim=0,
                 base_click_prob=0.1, cart_given_click_prob=0.5)
    test, _ = calibrate(to_samples(simulate(cfg, 1)))
    groups = case_groups(test)
    # carts of the final visit have nowhere to go, so count conversions by cart visit
    last = cfg.n_sessions_per_user - 1
    bad, good = groups["bad_case"][0], groups["good_case"][0]
    n_bad = int((test.cart_origin[bad] < last).sum())
    n_good = int((test.session[good] < last).sum())
    n = n_bad + n_good
    assert abs(n_bad / n - rho) <= 3 * np.sqrt(rho * (1 - rho) / n)


def test_case_split_is_deterministic(small_raw):
    test, _ = calibrate(small_raw)
    a = case_split_eval(tiny_model(test.schema), test).to_json()
    b = case_split_eval(tiny_model(test.schema), test).to_json()
    assert a == b


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def sweep_data():
    raw = to_samples(simulate(preset("tiny"), 0))
    return raw, calibrate(raw)[0]


def base_config(variant=Variant.ESMC):
    return TrainConfig(ModelConfig(variant, tower_hidden=(4,), bottom_hidden=(4,), head_hidden=(4,)),
                       batch_size=256, warmup_steps=2)


def test_sweep_rows(sweep_data):
    seen = []
    rows = sweep(base_config(), {"kl": [0.0, 0.5]}, [0, 1], *sweep_data, on_row=seen.append)
    assert len(rows) == 4 and seen == rows
    assert [(r["value"], r["seed"]) for r in rows] == [(0.0, 0), (0.0, 1), (0.5, 0), (0.5, 1)]
    assert all(r["error"] is None and r["tower_distance"] > 0 for r in rows)
    assert set(SWEEP_COLUMNS) <= set(rows[0])
    table = sweep_table(rows)
    assert len(table.splitlines()) == 5
    assert set(summarize(rows, "ctcvr_auc")) == {("kl", 0.0), ("kl", 0.5)}


def test_single_point_grid(sweep_data):
    assert len(sweep(base_config(), {"kl": [0.05]}, [3], *sweep_data)) == 1


def test_sweep_records_errors(sweep_data):
    rows = sweep(base_config(), {"lr": [0.01, -1.0]}, [0], *sweep_data)
    assert rows[0]["error"] is None
    assert rows[1]["error"].startswith("ConfigError") and rows[1]["ctcvr_auc"] is None
    assert "ERROR" in sweep_table(rows)
    assert ("lr", -1.0) not in summarize(rows, "ctcvr_auc")


def test_sweep_workers_agree(sweep_data):
    one = sweep(base_config(), {"kl": [0.1]}, [0, 1], *sweep_data)
    two = sweep(base_config(), {"kl": [0.1]}, [0, 1], *sweep_data, workers=2)
    assert one == two


def test_sweep_non_twin_has_no_distance(sweep_data):
    rows = sweep(base_config(Variant.ESMS), {"ctcar": [1.0]}, [0], *sweep_data)
    assert rows[0]["tower_distance"] is None and rows[0]["error"] is None


def test_sweep_validation(sweep_data):
    with pytest.raises(ConfigError):
        sweep(base_config(), {}, [0], *sweep_data)
    with pytest.raises(ConfigError):
        sweep(base_config(), {"kl": [0.1]}, [], *sweep_data)
    rows = sweep(base_config(), {"colour": [1]}, [0], *sweep_data)
    assert "unknown sweep parameter" in rows[0]["error"]
