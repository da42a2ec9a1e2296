import numpy as np
import pytest

from urbanrep.errors import ConfigError
from urbanrep.harness import (
    EvalReport,
    few_shot_eval,
    fit_predictor,
    kfold_eval,
    metrics,
    ridge,
    save_report,
    score_predictor,
    zero_shot_eval,
)
from urbanrep.sources import EmbeddingMatrix

from oracles import least_squares_fit


def emb_of(matrix, source="test"):
    ids = [f"r{i:04d}" for i in range(len(matrix))]
    return EmbeddingMatrix(ids, np.asarray(matrix, float), source)


def labels_of(emb, values):
    return {rid: float(v) for rid, v in zip(emb.region_ids, values)}


# -- ridge ---------------------------------------------------------------------


def test_ridge_exact_fit():
    model = ridge(np.array([[0.0], [1.0]]), np.array([0.0, 1.0]), alpha=0.0)
    assert model.coef[0] == pytest.approx(1.0)
    assert model.intercept == pytest.approx(0.0)


def test_ridge_shrinkage_closed_form():
    model = ridge(np.array([[-1.0], [1.0]]), np.array([-1.0, 1.0]), alpha=1.0)
    assert model.coef[0] == pytest.approx(2.0 / 3.0)
    assert model.intercept == pytest.approx(0.0)


def test_ridge_constant_target():
    for alpha in (0.0, 0.5, 10.0):
        model = ridge(np.array([[0.0], [1.0], [2.0]]), np.array([4.0, 4.0, 4.0]), alpha)
        assert model.coef[0] == pytest.approx(0.0)
        assert model.intercept == pytest.approx(4.0)


def test_ridge_alpha_zero_matches_least_squares_oracle():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(20, 5))
    y = rng.normal(size=20)
    model = ridge(x, y, alpha=0.0)
    intercept, coef = least_squares_fit(x, y)
    assert np.allclose(model.coef, coef, atol=1e-8)
    assert model.intercept == pytest.approx(intercept, abs=1e-8)


def test_ridge_alpha_zero_singular_minimum_norm():
    # duplicated column: infinitely many optima; expect the minimum-norm one
    rng = np.random.default_rng(3)
    base = rng.normal(size=(10, 1))
    x = np.hstack([base, base])
    y = (2.0 * base[:, 0]) + 1.0
    model = ridge(x, y, alpha=0.0)
    assert model.coef[0] == pytest.approx(model.coef[1])  # symmetric split
    assert np.allclose(x @ model.coef + model.intercept, y, atol=1e-8)


def test_ridge_rejects_negative_alpha():
    with pytest.raises(ConfigError):
        ridge(np.ones((2, 1)), np.ones(2), alpha=-1.0)


# -- metrics --------------------------------------------------------------------


def test_metrics_perfect_prediction():
    m = metrics([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert (m.mae, m.rmse, m.r2) == (0.0, 0.0, 1.0)


def test_metrics_hand_case():
    m = metrics([1.0, 2.0, 3.0], [2.0, 2.0, 2.0])
    assert m.mae == pytest.approx(2.0 / 3.0)
    assert m.rmse == pytest.approx(np.sqrt(2.0 / 3.0))
    assert m.r2 == pytest.approx(0.0)


def test_metrics_mean_prediction_zero_r2():
    rng = np.random.default_rng(5)
    y = rng.normal(size=30)
    m = metrics(y, np.full(30, y.mean()))
    assert m.r2 == pytest.approx(0.0)


def test_metrics_constant_target_flags_r2():
    m = metrics([2.0, 2.0], [1.0, 3.0])
    assert m.r2 is None and not m.r2_defined


def test_metrics_rmse_dominates_mae():
    rng = np.random.default_rng(6)
    for _ in range(20):
        y = rng.normal(size=15)
        y_hat = rng.normal(size=15)
        m = metrics(y, y_hat)
        assert m.rmse >= m.mae >= 0.0
        assert m.r2 <= 1.0


def test_metrics_length_mismatch():
    with pytest.raises(ConfigError):
        metrics([1.0], [1.0, 2.0])


# -- k-fold ----------------------------------------------------------------------


def test_kfold_partitions_exactly():
    rng = np.random.default_rng(7)
    emb = emb_of(rng.normal(size=(23, 4)))
    labels = labels_of(emb, rng.normal(size=23))
    report = kfold_eval(emb, labels, k=5, seed=3)
    sizes = [s.n_test for s in report.splits]
    assert sum(sizes) == 23
    assert all(s.n_train == 23 - s.n_test for s in report.splits)
    assert max(sizes) - min(sizes) <= 1


def test_kfold_recovers_planted_linear_signal():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(40, 6))
    beta = rng.normal(size=6)
    y = x @ beta + 0.5
    emb = emb_of(x)
    report = kfold_eval(emb, labels_of(emb, y), k=5, seed=1, alpha=1e-6)
    assert report.r2 > 0.99


def test_kfold_deterministic():
    rng = np.random.default_rng(9)
    emb = emb_of(rng.normal(size=(15, 3)))
    labels = labels_of(emb, rng.normal(size=15))
    a = kfold_eval(emb, labels, k=3, seed=4)
    b = kfold_eval(emb, labels, k=3, seed=4)
    assert a.mae == b.mae and a.rmse == b.rmse and a.r2 == b.r2
    c = kfold_eval(emb, labels, k=3, seed=5)
    assert a.mae != c.mae


def test_kfold_rejects_too_many_folds():
    emb = emb_of(np.ones((3, 2)))
    with pytest.raises(ConfigError):
        kfold_eval(emb, labels_of(emb, [1, 2, 3]), k=5)


def test_kfold_requires_full_label_coverage():
    emb = emb_of(np.ones((3, 2)))
    with pytest.raises(ConfigError):
        kfold_eval(emb, {"r0000": 1.0}, k=2)


# -- few-shot ---------------------------------------------------------------------


def test_few_shot_split_arithmetic_180():
    rng = np.random.default_rng(10)
    emb = emb_of(rng.normal(size=(180, 4)))
    labels = labels_of(emb, rng.normal(size=180))
    report = few_shot_eval(emb, labels, ratio=0.10, repeats=3, seed=2)
    for s in report.splits:
        assert s.n_train == 18
        assert s.n_test == 162


def test_few_shot_resubstitution_flagged():
    rng = np.random.default_rng(11)
    emb = emb_of(rng.normal(size=(10, 2)))
    labels = labels_of(emb, rng.normal(size=10))
    report = few_shot_eval(emb, labels, ratio=1.0, repeats=2, seed=1)
    assert report.metadata.get("resubstitution") is True
    assert all(s.n_train == 10 and s.n_test == 10 for s in report.splits)


def test_few_shot_too_few_rows():
    emb = emb_of(np.ones((10, 2)))
    labels = labels_of(emb, range(10))
    with pytest.raises(ConfigError):
        few_shot_eval(emb, labels, ratio=0.1, repeats=1)  # 1 training row


def test_few_shot_deterministic():
    rng = np.random.default_rng(12)
    emb = emb_of(rng.normal(size=(30, 3)))
    labels = labels_of(emb, rng.normal(size=30))
    a = few_shot_eval(emb, labels, ratio=0.2, repeats=4, seed=9)
    b = few_shot_eval(emb, labels, ratio=0.2, repeats=4, seed=9)
    assert a.mae == b.mae and a.rmse == b.rmse


# -- zero-shot ---------------------------------------------------------------------


class CountingLabels(dict):
    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.reads = 0

    def __getitem__(self, key):
        self.reads += 1
        return super().__getitem__(key)


def test_zero_shot_src_equals_dst_is_resubstitution():
    rng = np.random.default_rng(13)
    emb = emb_of(rng.normal(size=(12, 3)))
    labels = labels_of(emb, rng.normal(size=12))
    report = zero_shot_eval(emb, labels, emb, labels, alpha=0.5)
    model = fit_predictor(emb, labels, alpha=0.5)
    expected = score_predictor(model, emb, labels)
    assert report.mae == pytest.approx(expected.mae)
    assert report.rmse == pytest.approx(expected.rmse)
    assert report.r2 == pytest.approx(expected.r2)


def test_zero_shot_never_reads_target_labels_before_scoring():
    rng = np.random.default_rng(14)
    src = emb_of(rng.normal(size=(12, 3)), source="src")
    dst = emb_of(rng.normal(size=(9, 3)), source="dst")
    src_labels = labels_of(src, rng.normal(size=12))
    dst_labels = CountingLabels(labels_of(dst, rng.normal(size=9)))
    seen = {}

    def after_fit(model):
        seen["reads_at_fit"] = dst_labels.reads

    zero_shot_eval(src, src_labels, dst, dst_labels, after_fit=after_fit)
    assert seen["reads_at_fit"] == 0
    assert dst_labels.reads == 9  # touched exactly once per region, at scoring


def test_zero_shot_dimension_mismatch():
    src = emb_of(np.ones((3, 2)))
    dst = emb_of(np.ones((3, 4)))
    with pytest.raises(ConfigError):
        zero_shot_eval(src, labels_of(src, [1, 2, 3]), dst, labels_of(dst, [1, 2, 3]))


def test_zero_shot_constant_target_flags_r2():
    rng = np.random.default_rng(15)
    src = emb_of(rng.normal(size=(8, 2)))
    dst = emb_of(rng.normal(size=(5, 2)))
    report = zero_shot_eval(
        src, labels_of(src, rng.normal(size=8)), dst, labels_of(dst, np.ones(5))
    )
    assert report.r2 is None
    assert report.metadata.get("r2_undefined") is True


# -- report files -------------------------------------------------------------------


def test_save_report_layout(tmp_path):
    rng = np.random.default_rng(16)
    emb = emb_of(rng.normal(size=(10, 2)))
    labels = labels_of(emb, rng.normal(size=10))
    report = kfold_eval(emb, labels, k=2, seed=0)
    path = tmp_path / "report.csv"
    save_report(report, path, run_hash="deadbeef")
    lines = path.read_text().splitlines()
    assert lines[0] == "# config_hash=deadbeef"
    assert any(line.startswith("split,") for line in lines)
    assert lines[-1].startswith("aggregate,")


def test_embedding_matrix_rejects_nonfinite():
    with pytest.raises(ValueError):
        emb_of([[np.nan, 1.0]])
