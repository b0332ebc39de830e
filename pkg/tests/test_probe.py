import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from psgcl.embeddings import EmbeddingSet
from psgcl.probe import (FEW_SHOT_K, ProbeConfig, UndefinedMetric, auprc, auroc, balanced_class_weights, bootstrap_ci,
                         evaluate_task, f1_score, few_shot_curve, fit_probe, score_predictions, write_reports)


# AUROC / AUPRC ---------------------------------------------------------------

def test_auroc_examples():
    assert auroc([0.9, 0.1], [1, 0]) == 1.0
    assert auroc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    assert auroc([0.8, 0.6, 0.4, 0.2], [1, 0, 1, 0]) == pytest.approx(0.75, abs=1e-12)


def test_auroc_needs_both_classes():
    with pytest.raises(UndefinedMetric):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [1, 2])


def test_auprc_examples():
    assert auprc([0.8, 0.6, 0.4], [1, 0, 1]) == pytest.approx(5 / 6, abs=1e-12)
    assert auprc([0.9, 0.8, 0.1, 0.05], [1, 1, 0, 0]) == 1.0
    with pytest.raises(UndefinedMetric):
        auprc([0.1, 0.2], [0, 0])


def test_auprc_random_scores_near_prevalence():
    rng = np.random.default_rng(0)
    y = (rng.random(20000) < 0.1).astype(int)
    assert auprc(rng.random(20000), y) == pytest.approx(y.mean(), abs=0.02)


def test_metric_oracles_exhaustive():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(2, 51))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = np.round(rng.random(n), 1)  # coarse grid forces ties
        assert abs(auroc(s, y) - oracles.auroc_pairs(s.tolist(), y.tolist())) <= 1e-12
        assert abs(auprc(s, y) - oracles.auprc_staircase(s.tolist(), y.tolist())) <= 1e-12


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 1)), min_size=2, max_size=20))
def test_metric_oracles_property(pairs):
    s = [p[0] / 5 for p in pairs]
    y = [p[1] for p in pairs]
    if 0 < sum(y) < len(y):
        assert abs(auroc(s, y) - oracles.auroc_pairs(s, y)) <= 1e-12
    if sum(y) > 0:
        assert abs(auprc(s, y) - oracles.auprc_staircase(s, y)) <= 1e-12


def test_random_auroc_near_half():
    rng = np.random.default_rng(2)
    assert 0.48 <= auroc(rng.random(5000), rng.integers(0, 2, 5000)) <= 0.52


def test_f1():
    assert f1_score([1, 1, 0, 0], [1, 0, 1, 0]) == pytest.approx(0.5)
    assert f1_score([0, 0], [0, 0]) == 0.0


# bootstrap -----------------------------------------------------------------

def test_bootstrap_separated_is_zero_width():
    s = np.r_[np.zeros(20), np.ones(20)]
    y = s.astype(int)
    assert bootstrap_ci(s, y, auroc, 200, seed=1) == (1.0, 1.0)


def test_bootstrap_deterministic_and_ordered():
    rng = np.random.default_rng(3)
    y = rng.integers(0, 2, 300)
    s = y + rng.standard_normal(300)
    a = bootstrap_ci(s, y, auroc, 300, seed=5)
    assert a == bootstrap_ci(s, y, auroc, 300, seed=5)
    assert a[0] <= auroc(s, y) <= a[1]


def test_bootstrap_requires_100_resamples():
    with pytest.raises(ValueError):
        bootstrap_ci([0.1, 0.9], [0, 1], auroc, 10)


def test_bootstrap_width_scales_with_root_n():
    rng = np.random.default_rng(4)

    def width(n):
        y = rng.integers(0, 2, n)
        s = y + 1.5 * rng.standard_normal(n)
        lo, hi = bootstrap_ci(s, y, auroc, 400, seed=0)
        return hi - lo

    ratios = [width(400) / width(1600) for _ in range(3)]
    assert 2 / 1.5 <= np.median(ratios) <= 2 * 1.5


def test_bootstrap_redraws_single_class_resamples():
    # 1 positive in 30: many resamples miss it, those must be redrawn, not crash
    y = np.zeros(30, int)
    y[0] = 1
    s = np.linspace(0, 1, 30)[::-1]
    lo, hi = bootstrap_ci(s, y, auroc, 200, seed=2)
    assert lo == hi == 1.0


# probe -----------------------------------------------------------------------

def test_balanced_weights_formula():
    y = np.r_[np.zeros(99), np.ones(1)].astype(int)
    w = balanced_class_weights(y)
    assert w[0] == pytest.approx(100 / (2 * 99))
    assert w[1] == pytest.approx(50.0)
    # inverse-frequency ratio n_0 / n_1
    assert w[1] / w[0] == pytest.approx(99.0, rel=1e-12)


def test_probe_separable_and_errors():
    rng = np.random.default_rng(5)
    x = np.r_[rng.normal(-3, 1, (50, 4)), rng.normal(3, 1, (50, 4))]
    y = np.r_[np.zeros(50), np.ones(50)].astype(int)
    model = fit_probe(x, y)
    assert (model.predict(x) == y).mean() == 1.0
    assert model.converged
    with pytest.raises(ValueError):
        fit_probe(x, np.zeros(100, int))
    with pytest.raises(ValueError):
        ProbeConfig(penalty="l1")


def test_probe_deterministic():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((200, 6))
    y = (x[:, 0] + 0.5 * rng.standard_normal(200) > 0).astype(int)
    a, b = fit_probe(x, y), fit_probe(x, y)
    np.testing.assert_array_equal(a.model.coef_, b.model.coef_)


def test_probe_records_nonconvergence():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((300, 20))
    y = rng.integers(0, 5, 300)
    assert not fit_probe(x, y, ProbeConfig(max_iterations=2)).converged


def make_embset(n_part=12, clips=40, d=8, signal=2.0, seed=0, n_classes=5):
    rng = np.random.default_rng(seed)
    n = n_part * clips
    stage = rng.integers(0, n_classes, n)
    sdb = (rng.random(n) < 0.1).astype(np.int64)
    centers = rng.standard_normal((n_classes, d)) * signal
    base = centers[stage] + rng.standard_normal((n, d))
    per = {"BAS": base.astype(np.float32),
           "ECG": (rng.standard_normal((n, d)) + signal * sdb[:, None]).astype(np.float32)}
    pids = np.repeat([f"p{i:02d}" for i in range(n_part)], clips).astype(object)
    split = np.where(np.repeat(np.arange(n_part), clips) < n_part // 2, "train", "test").astype(object)
    labels = {"stage_label": stage, "sdb_label": sdb,
              "age_group": np.repeat(np.arange(n_part) % 4, clips), "sex": np.repeat(np.arange(n_part) % 2, clips)}
    return EmbeddingSet(per, pids, np.tile(np.arange(clips), n_part), labels, split)


def test_evaluate_stage5_shape_and_ranges(tmp_path):
    emb = make_embset()
    rep = evaluate_task(emb, "stage5", n_boot=100)[0]
    assert len(rep.classes) == 5
    assert rep.metric("auroc") > 0.9
    rows = list(rep.rows())
    assert sum(r["cls"] == "macro" for r in rows) == 2
    for c in rep.classes:
        for point, lo, hi in c.values.values():
            assert 0 <= lo <= point <= hi <= 1
    assert rep.metric("auroc") == pytest.approx(np.mean([c.values["auroc"][0] for c in rep.classes]))
    write_reports([rep], tmp_path / "r.csv")
    header = (tmp_path / "r.csv").read_text().splitlines()[0]
    assert header == "task,source,stratum,class,metric,point,ci_low,ci_high,n,prevalence"


def test_evaluate_sdb_single_row_and_per_modality():
    emb = make_embset()
    rep = evaluate_task(emb, "sdb", source="ECG", n_boot=0)[0]
    assert [c.name for c in rep.classes] == ["SDB"]
    assert rep.classes[0].prevalence == pytest.approx(emb.labels["sdb_label"][emb.split == "test"].mean())
    assert rep.source == "ECG"
    bas = evaluate_task(emb, "stage5", source="BAS", n_boot=0)[0]
    ecg = evaluate_task(emb, "stage5", source="ECG", n_boot=0)[0]
    assert len(bas.classes) == len(ecg.classes)


def test_stratified_reports_use_only_their_stratum():
    emb = make_embset()
    reps = evaluate_task(emb, "stage5", strata="sex", n_boot=0)
    assert [r.stratum for r in reps] == ["sex=male", "sex=female"]
    test = emb.split == "test"
    for g, rep in enumerate(reps):
        assert rep.n_samples == int((emb.labels["sex"][test] == g).sum())


def test_stratum_with_one_class_is_undefined():
    emb = make_embset(n_part=8)
    # make every test clip of one stratum non-SDB
    mask = (emb.split == "test") & (emb.labels["sex"] == 0)
    emb.labels["sdb_label"][mask] = 0
    reps = evaluate_task(emb, "sdb", strata="sex", n_boot=0)
    assert reps[0].undefined and not reps[1].undefined


def test_label_shuffle_null():
    emb = make_embset(n_part=20, clips=200, seed=3)
    rng = np.random.default_rng(0)
    emb.labels["stage_label"] = rng.permutation(emb.labels["stage_label"])
    assert 0.45 <= evaluate_task(emb, "stage5", n_boot=0)[0].metric("auroc") <= 0.55


def test_score_predictions_with_f1():
    probs = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]])
    rep = score_predictions("sex", probs, np.array([0, 1, 1, 1]), n_boot=0, with_f1=True)
    assert rep.metric("f1") == pytest.approx(f1_score([0, 1, 0, 1], [0, 1, 1, 1]))


# few-shot --------------------------------------------------------------------

def test_default_k_grid():
    assert FEW_SHOT_K == (1, 2, 4, 8, 16, 32, 64, 128, "all")


def test_few_shot_all_equals_full_probe():
    emb = make_embset()
    curve = few_shot_curve(emb.by_split("train"), emb.by_split("test"), ["all"], replicates=1)
    full = evaluate_task(emb, "stage5", n_boot=0)[0]
    assert curve.mean()[6] == pytest.approx(full.metric("auroc"), abs=1e-12)


def test_few_shot_deterministic_and_validates():
    emb = make_embset()
    tr, te = emb.by_split("train"), emb.by_split("test")
    a = few_shot_curve(tr, te, [1, 2, "all"], seed=4)
    b = few_shot_curve(tr, te, [1, 2, "all"], seed=4)
    assert [p.participants for p in a.points] == [p.participants for p in b.points]
    assert len(a.points) == 9
    with pytest.raises(ValueError):
        few_shot_curve(tr, te, [7])
    with pytest.raises(ValueError):
        few_shot_curve(tr, te, [1], replicates=0)


def test_few_shot_more_participants_helps():
    emb = make_embset(n_part=24, clips=10, signal=0.6, seed=8)
    m = few_shot_curve(emb.by_split("train"), emb.by_split("test"), [1, "all"], replicates=3).mean()
    assert m[12] >= m[1] - 0.02
    assert not math.isnan(m[1])
