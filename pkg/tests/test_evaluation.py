import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relnov import numerics as nx
from relnov.data import DataError, LabeledDataset
from relnov.evaluation import (MetricError, MetricsReport, PrototypeSet, ScoreSet, auroc,
                               baseline_score, compute_prototypes, ensemble_average, evaluate,
                               fpr95, fpr95_threshold, h_score, msp, normality_score, read_scores,
                               report_from_scores, roc_points, similarities, trapezoid_area,
                               write_scores)
from relnov.model import ModelConfig, RelationalModel


# ---------------------------------------------------------------- independent oracles


def auroc_bruteforce(known, unknown):
    total = 0.0
    for k in known:
        for u in unknown:
            total += 1.0 if k > u else 0.5 if k == u else 0.0
    return total / (len(known) * len(unknown))


def fpr95_sweep(known, unknown):
    # try every candidate threshold, keep the largest one meeting TPR >= 0.95
    best = None
    for t in sorted(set(known) | set(unknown)):
        if sum(k >= t for k in known) * 100 >= 95 * len(known):
            best = t
    return sum(u >= best for u in unknown) / len(unknown)


def make(known, unknown):
    return ScoreSet(np.r_[known, unknown], np.r_[np.ones(len(known)), np.zeros(len(unknown))])


# ---------------------------------------------------------------- auroc / fpr95


def test_auroc_examples():
    assert auroc(make([0.9, 0.8], [0.3, 0.2])) == 1.0
    assert auroc(make([0.3, 0.2], [0.9, 0.8])) == 0.0
    assert auroc(make([0.9, 0.4], [0.6])) == 0.5


def test_single_class_error():
    with pytest.raises(MetricError):
        auroc(make([0.5, 0.6], []))
    with pytest.raises(MetricError):
        fpr95(make([], [0.1]))


def test_fpr95_examples():
    assert fpr95(make([0.9, 0.8], [0.1, 0.2])) == 0.0
    assert fpr95(make([0.1, 0.2], [0.9, 0.8])) == 1.0
    known = np.linspace(0.5, 1, 101)[1:]
    unknown = np.linspace(0, 0.6, 101)[1:]
    assert fpr95(make(known, unknown)) == fpr95_sweep(list(known), list(unknown))


def test_oracles_on_random_sets():
    rng = np.random.default_rng(2024)
    for i in range(100):
        nk, nu = rng.integers(1, 100, size=2)
        levels = rng.integers(2, 30)
        # a coarse grid forces ties
        known = rng.integers(0, levels, nk) / levels
        unknown = rng.integers(0, levels, nu) / levels * 0.9
        s = make(known, unknown)
        assert abs(auroc(s) - auroc_bruteforce(known, unknown)) <= 1e-12
        assert abs(fpr95(s) - fpr95_sweep(list(known), list(unknown))) <= 1e-12
        assert abs(trapezoid_area(roc_points(s)) - auroc(s)) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=40),
       st.lists(st.floats(0, 1), min_size=1, max_size=40))
def test_auroc_monotone_transform_and_shift(known, unknown):
    s = make(known, unknown)
    a = auroc(s)
    cubed = ScoreSet(s.scores ** 3, s.is_known)
    assert auroc(cubed) == pytest.approx(a, abs=1e-12) or _collisions(s.scores, cubed.scores)
    shifted = ScoreSet(s.scores + 0.5, s.is_known)
    assert auroc(shifted) == pytest.approx(a, abs=1e-12) or _collisions(s.scores, shifted.scores)
    assert fpr95(shifted) == fpr95(s) or _collisions(s.scores, shifted.scores)


def _collisions(a, b):
    # float rounding can merge distinct values; only then may the metric move
    return len(np.unique(a)) != len(np.unique(b))


def test_roc_points_monotone():
    rng = np.random.default_rng(0)
    s = make(rng.random(50), rng.random(40))
    pts = np.array(roc_points(s))
    assert pts[0].tolist() == [0, 0] and pts[-1].tolist() == [1, 1]
    assert np.all(np.diff(pts, axis=0) >= 0)


def test_fpr95_threshold_integer_rounding():
    # 20 known: 95% is exactly 19 -> 19th largest
    known = np.arange(20) / 20.0
    assert fpr95_threshold(make(known, [0.0])) == known[1]


# ---------------------------------------------------------------- h-score, msp, similarities


def test_h_score_examples():
    assert h_score(0.5, 0.5) == 0.5
    assert h_score(0, 0.7) == 0
    assert h_score(0, 0) == 0.0
    assert h_score(0.6, 0.4) == pytest.approx(0.48, abs=1e-15)


def test_msp_bounds_and_examples():
    s, c = msp(np.zeros(4))
    assert s == 0.25 and c == 0
    s, _ = msp(np.array([1000.0, 0.0, 0.0]))
    assert s == pytest.approx(1.0)
    rng = np.random.default_rng(1)
    u = rng.normal(size=(100, 5)) * 10
    s, c = msp(u)
    assert np.all((s >= 0.2 - 1e-12) & (s <= 1))
    s2, c2 = msp(u * 3.7)
    np.testing.assert_array_equal(c, c2)
    s3, c3 = msp(u + 11.0)
    np.testing.assert_allclose(s3, s, rtol=1e-12)


def test_similarity_examples():
    protos = PrototypeSet(np.array([0, 1]), np.array([[0.0, 0.0], [1.0, 0.0]]))
    sim = similarities([0.0, 0.0], protos, "inv_euclidean")
    np.testing.assert_allclose(sim, [[1.0, 0.5]])
    protos = PrototypeSet(np.array([0, 1]), np.array([[0.0, 1.0], [1.0, 0.0]]))
    np.testing.assert_allclose(similarities([1.0, 0.0], protos, "cosine"), [[0.0, 1.0]])
    with pytest.raises(nx.NumericError):
        similarities([0.0, 0.0], protos, "cosine")
    score, cls = baseline_score(np.array([1.0, 0.0]), protos, "cosine")
    assert cls == 1 and score == pytest.approx(math.e / (1 + math.e))


def test_prototypes():
    sup = LabeledDataset(np.array([[1.0, 2.0], [3.0, 4.0], [7.0, 7.0]]), [0, 0, 5])
    p = compute_prototypes(sup)
    np.testing.assert_array_equal(p.class_ids, [0, 5])
    np.testing.assert_allclose(p.prototypes, [[2, 3], [7, 7]])
    doubled = LabeledDataset(np.tile(sup.features, (2, 1)), np.tile(sup.labels, 2))
    np.testing.assert_allclose(compute_prototypes(doubled).prototypes, p.prototypes)
    with pytest.raises(DataError):
        compute_prototypes(LabeledDataset(np.zeros((0, 2)), []))


def test_normality_score_needs_two_classes():
    m = RelationalModel(ModelConfig(input_dim=2, feature_dim=4, model_dim=4, num_blocks=1,
                                    num_heads=1))
    protos = PrototypeSet(np.array([0]), np.zeros((1, 4)))
    with pytest.raises(MetricError):
        normality_score(np.zeros(2), protos, m)


def test_normality_score_range_and_shape():
    m = RelationalModel(ModelConfig(input_dim=3, feature_dim=4, model_dim=4, num_blocks=1,
                                    num_heads=2))
    rng = np.random.default_rng(0)
    protos = PrototypeSet(np.array([2, 4, 9]), rng.normal(size=(3, 4)))
    s, c = normality_score(rng.normal(size=(10, 3)), protos, m)
    assert s.shape == (10,) and np.all((s >= 1 / 3 - 1e-12) & (s <= 1))
    assert set(c) <= {2, 4, 9}
    s1, c1 = normality_score(rng.normal(size=3), protos, m)
    assert np.ndim(s1) == 0


# ---------------------------------------------------------------- ensemble


def test_ensemble_examples():
    a = ScoreSet([0.8, 0.2], [1, 0], [3, -1])
    b = ScoreSet([0.6, 0.4], [1, 0], [-1, 2])
    out = ensemble_average(a, b)
    np.testing.assert_allclose(out.scores, [0.7, 0.3])
    np.testing.assert_array_equal(out.pred_class, [3, 2])
    same = ensemble_average(a, a)
    assert same.scores.tobytes() == a.scores.tobytes()
    np.testing.assert_array_equal(same.pred_class, a.pred_class)
    with pytest.raises(MetricError):
        ensemble_average(a, ScoreSet([0.5], [1]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1), st.integers(-1, 3),
                          st.integers(-1, 3), st.booleans()), min_size=1, max_size=30),
       st.booleans())
def test_ensemble_commutative_idempotent(rows, normalize):
    sa, sb, pa, pb, k = map(np.array, zip(*rows))
    a, b = ScoreSet(sa, k, pa), ScoreSet(sb, k, pb)
    ab, ba = ensemble_average(a, b, normalize), ensemble_average(b, a, normalize)
    assert ab.scores.tobytes() == ba.scores.tobytes()
    np.testing.assert_array_equal(ab.pred_class, ba.pred_class)
    aa = ensemble_average(a, a)
    assert aa.scores.tobytes() == a.scores.tobytes()


def test_ensemble_complementary_scorers():
    # each scorer nails one half of the unknowns and is fooled by the other half
    known = np.full(10, 0.6)
    a = np.r_[known, np.full(5, 0.1), np.full(5, 0.9)]
    b = np.r_[known, np.full(5, 0.9), np.full(5, 0.1)]
    flags = np.r_[np.ones(10), np.zeros(10)]
    sa, sb = ScoreSet(a, flags), ScoreSet(b, flags)
    ens = ensemble_average(sa, sb)
    assert auroc(ens) >= max(auroc(sa), auroc(sb))
    assert auroc(ens) == auroc_bruteforce(ens.known, ens.unknown) == 1.0


# ---------------------------------------------------------------- pipeline and files


def _blobs(seed=0):
    rng = np.random.default_rng(seed)
    means = np.eye(4, 8) * 8
    sup = LabeledDataset(np.concatenate([m + rng.normal(size=(20, 8)) for m in means[:2]]),
                         np.repeat([0, 1], 20))
    test = LabeledDataset(np.concatenate([m + rng.normal(size=(20, 8)) for m in means]),
                          np.repeat([0, 1, 2, 3], 20))
    return sup, test


def test_evaluate_baseline_pipeline(tmp_path):
    sup, test = _blobs()
    rep, scores = evaluate(sup, test, "inv_euclidean")
    assert 0 <= rep.auroc <= 1 and rep.n_known == 40 and rep.n_unknown == 40
    assert rep.acc == 1.0
    assert list(rep.to_dict()) == ["auroc", "fpr95", "acc", "h_score", "n_known", "n_unknown",
                                   "seed", "config_digest"]
    rep2, _ = evaluate(sup, test, "inv_euclidean")
    assert rep.to_json() == rep2.to_json()
    write_scores(scores, tmp_path / "s.csv")
    back = read_scores(tmp_path / "s.csv")
    assert back.scores.tobytes() == scores.scores.tobytes()
    np.testing.assert_array_equal(back.pred_class, scores.pred_class)


def test_evaluate_no_unknowns_errors():
    sup, _ = _blobs()
    with pytest.raises(MetricError):
        evaluate(sup, sup, "cosine")


def test_evaluate_dimension_mismatch():
    sup, test = _blobs()
    with pytest.raises(DataError):
        evaluate(sup, LabeledDataset(test.features[:, :4], test.labels), "cosine")


def test_random_model_is_near_chance():
    rng = np.random.default_rng(3)
    sup = LabeledDataset(rng.normal(size=(100, 8)), np.repeat(np.arange(5), 20))
    test = LabeledDataset(rng.normal(size=(600, 8)), np.repeat(np.arange(10), 60))
    m = RelationalModel(ModelConfig(input_dim=8, feature_dim=16, model_dim=16, num_blocks=1,
                                    num_heads=2, seed=1))
    rep, _ = evaluate(sup, test, "relational", m)
    assert abs(rep.auroc - 0.5) <= 0.1


def test_report_without_labels_has_null_acc():
    rep = report_from_scores(make([0.9], [0.1]))
    assert rep.acc is None and rep.h_score is None
    assert '"acc": null' in rep.to_json()


def test_read_scores_rejects_bad_files(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("id,score\n1,0.5\n")
    with pytest.raises(ValueError):
        read_scores(p)
    p.write_text("sample_id,score,is_known,pred_class\n0,1.5,1,0\n")
    with pytest.raises(ValueError):
        read_scores(p)
