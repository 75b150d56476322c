from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_auc

from ehraug.augment import AugmentConfig, sample_augmentations
from ehraug.metrics import (
    ScoredExample,
    auc,
    metrics_report,
    roc_points,
    score_examples,
    tta_examples,
    tta_score,
    trapezoid_auc,
)
from ehraug.records import LabelKind, LabelOutcome, PatientRecord, Visit


def ex(scores, labels):
    return [ScoredExample(f"p{i}", s, l) for i, (s, l) in enumerate(zip(scores, labels))]


def random_fixture(rng, n_max=50):
    n = int(rng.integers(2, n_max + 1))
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    # a coarse grid makes ties common
    scores = rng.integers(0, int(rng.integers(2, 12)), n) / 10.0
    return scores.tolist(), labels.tolist()


class TestAuc:
    def test_perfect(self):
        assert auc(ex([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])) == 1.0

    def test_all_tied(self):
        assert auc(ex([0.5] * 6, [1, 0, 1, 0, 0, 1])) == 0.5

    def test_small_example(self):
        e = ex([0.9, 0.4, 0.6], [1, 0, 1])
        assert auc(e) == brute_force_auc([0.9, 0.4, 0.6], [1, 0, 1]) == 1.0

    def test_mixed_example(self):
        # pairs: (0.8>0.3) (0.8>0.5) (0.4>0.3) (0.4<0.5) -> 3/4
        assert auc(ex([0.8, 0.4, 0.3, 0.5], [1, 1, 0, 0])) == 0.75

    def test_inverted(self):
        assert auc(ex([0.1, 0.9], [1, 0])) == 0.0

    @pytest.mark.parametrize("labels", [[1, 1], [0, 0]])
    def test_single_class_rejected(self, labels):
        with pytest.raises(ValueError):
            auc(ex([0.1, 0.2], labels))

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            auc(ex([np.nan, 0.2], [1, 0]))

    def test_oracle_and_dual_path(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            s, l = random_fixture(rng)
            e = ex(s, l)
            a = auc(e)
            assert a == brute_force_auc(s, l)
            assert abs(roc_points(e).auc - a) <= 1e-12

    @settings(max_examples=100)
    @given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 1)), min_size=2, max_size=50))
    def test_monotone_invariance_and_flip(self, pairs):
        scores = [s / 10 for s, _ in pairs]
        labels = [l for _, l in pairs]
        if len(set(labels)) < 2:
            return
        a = auc(ex(scores, labels))
        assert auc(ex([np.exp(3 * s) - 7 for s in scores], labels)) == a
        assert auc(ex([1 - s for s in scores], [1 - l for l in labels])) == pytest.approx(a, abs=1e-15)


class TestRoc:
    def test_separated_passes_corner(self):
        curve = roc_points(ex([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]))
        assert (0.0, 1.0) in curve.points and curve.auc == 1.0

    def test_identical_scores_two_points(self):
        assert roc_points(ex([0.3] * 4, [1, 0, 1, 0])).points == [(0.0, 0.0), (1.0, 1.0)]

    def test_endpoints_and_monotone(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            pts = roc_points(ex(*random_fixture(rng))).points
            assert pts[0] == (0.0, 0.0) and pts[-1] == (1.0, 1.0)
            xs, ys = zip(*pts)
            assert list(xs) == sorted(xs) and list(ys) == sorted(ys)

    def test_trapezoid_square(self):
        assert trapezoid_auc([(0, 0), (0, 1), (1, 1)]) == 1.0
        assert trapezoid_auc([(0, 0), (1, 1)]) == 0.5


D0 = date(2015, 1, 1)


def labeled_patient(pid, kind, codes_per_visit):
    visits = tuple(
        Visit(D0 + timedelta(days=10 * i), tuple(codes)) for i, codes in enumerate(codes_per_visit)
    )
    return PatientRecord(pid, visits, LabelOutcome(kind, D0, None))


class OrderSensitiveModel:
    """Scores a sequence by where its first code lands; stands in for a classifier."""

    def score_sequences(self, seqs):
        return np.array([(sum(map(ord, s.tokens[0])) % 97) / 96 for s in seqs], dtype=np.float64)

    def score_patients(self, patients):
        from ehraug.augment import identity_sequence

        return self.score_sequences([identity_sequence(p) for p in patients])


class TestTta:
    model = OrderSensitiveModel()

    def test_alpha_one_is_plain(self):
        p = labeled_patient("a", LabelKind.CASE, [["x", "y", "z"]])
        assert tta_score(self.model, p, 1) == self.model.score_patients([p])[0]

    def test_single_ordering_any_alpha(self):
        p = labeled_patient("a", LabelKind.CASE, [["x"], ["y"]])
        assert tta_score(self.model, p, 16, seed=4) == self.model.score_patients([p])[0]

    def test_mean_of_augmentations(self):
        p = labeled_patient("a", LabelKind.CONTROL, [["x", "y", "z", "w"]])
        seqs = sample_augmentations(p, AugmentConfig(alpha=4, seed=2))
        scores = self.model.score_sequences(seqs)
        got = tta_score(self.model, p, 4, seed=2)
        assert got == pytest.approx(scores.mean())
        assert scores.min() <= got <= scores.max()
        assert tta_score(self.model, p, 4, seed=2) == got

    def test_report_shape(self):
        pats = [
            labeled_patient("a", LabelKind.CASE, [["x", "y"]]),
            labeled_patient("b", LabelKind.CONTROL, [["y", "x"]]),
            labeled_patient("c", LabelKind.CONTROL, [["q"]]),
        ]
        rep = metrics_report(score_examples(self.model, pats), tta_examples(self.model, pats, 2))
        assert set(rep) == {"auc", "auc_tta", "roc", "n_case", "n_control"}
        assert rep["n_case"] == 1 and rep["n_control"] == 2
        assert metrics_report(score_examples(self.model, pats))["auc_tta"] is None

    def test_unlabeled_rejected(self):
        p = labeled_patient("a", LabelKind.EXCLUDED, [["x"]])
        with pytest.raises(ValueError):
            score_examples(self.model, [p])
