import math

import numpy as np
import pandas as pd
import pytest
import torch

from semcommlib.Detector import Detector, DetectorState
from semcommlib.Objectives import ClassPrior
from semcommlib.models import Verdict
from semcommlib.exceptions import ParameterError

DOUBLE = torch.float64


@pytest.fixture
def two_class_state() -> DetectorState:
    return DetectorState(priors={
        0: ClassPrior(mean=torch.tensor([-2.0, 0.0], dtype=DOUBLE), covariance=torch.eye(2, dtype=DOUBLE)),
        1: ClassPrior(mean=torch.tensor([2.0, 0.0], dtype=DOUBLE), covariance=torch.eye(2, dtype=DOUBLE)),
    })


class TestOodScore:

    def test_density_at_a_class_mean(self):
        detector = Detector(DetectorState(priors={ 0: ClassPrior.standard_normal(3, DOUBLE) }))
        assert detector.ood_score(torch.zeros(3, dtype=DOUBLE)) == pytest.approx(-1.5 * math.log(2 * math.pi))

    def test_decreases_away_from_the_means(self, two_class_state):
        detector = Detector(two_class_state)
        scores = [detector.ood_score(torch.tensor([2.0 + r, 0.0], dtype=DOUBLE)) for r in (0.0, 0.5, 1.0, 3.0, 10.0)]
        assert scores == sorted(scores, reverse=True)

    def test_best_class_wins(self, two_class_state):
        detector = Detector(two_class_state)
        assert detector.ood_score(torch.tensor([-2.0, 0.0], dtype=DOUBLE)) == pytest.approx(detector.ood_score(torch.tensor([2.0, 0.0], dtype=DOUBLE)))

    def test_batched_scores(self, two_class_state):
        z_hat = torch.tensor([[2.0, 0.0], [0.0, 5.0], [-2.0, 1.0]], dtype=DOUBLE)
        scores = Detector(two_class_state).ood_score(z_hat)
        assert scores.shape == (3,)
        assert float(scores[1]) < float(scores[2]) < float(scores[0])

    def test_score_transform(self, two_class_state):
        detector = Detector(two_class_state, score_transform=lambda scores, z_hat: scores - z_hat.norm(dim=-1))
        plain = Detector(two_class_state).ood_score(torch.tensor([2.0, 0.0], dtype=DOUBLE))
        assert detector.ood_score(torch.tensor([2.0, 0.0], dtype=DOUBLE)) == pytest.approx(plain - 2.0)

    def test_dimension_mismatch(self, two_class_state):
        with pytest.raises(ParameterError):
            Detector(two_class_state).ood_score(torch.zeros(3, dtype=DOUBLE))

    def test_needs_priors(self):
        with pytest.raises(ParameterError):
            Detector().ood_score(torch.zeros(2))
        with pytest.raises(ParameterError):
            DetectorState(priors={})


class TestDetect:

    @pytest.mark.parametrize('score, threshold, expected', [
        (-1.0, 0.0, Verdict.semantic_shift),
        (0.0, 0.0, Verdict.in_distribution),
        (1.0, 0.0, Verdict.in_distribution),
        (-1e9, -math.inf, Verdict.in_distribution),
    ])
    def test_threshold_boundary(self, score, threshold, expected):
        assert Detector.detect(score, threshold) == expected

    def test_verdicts_use_the_state_threshold(self, two_class_state):
        two_class_state.threshold = -3.0
        verdicts = Detector(two_class_state).verdicts([-5.0, -3.0, 0.0])
        assert verdicts == [Verdict.semantic_shift, Verdict.in_distribution, Verdict.in_distribution]


class TestAuroc:

    @pytest.mark.parametrize('id_scores, ood_scores, expected', [
        ([3.0, 1.0], [2.0, 0.0], 0.75),
        ([5.0, 6.0], [1.0, 2.0], 1.0),
        ([1.0, 1.0], [1.0, 1.0], 0.5),
        ([0.0], [1.0], 0.0),
    ])
    def test_examples(self, id_scores, ood_scores, expected):
        assert Detector.auroc(id_scores, ood_scores) == pytest.approx(expected)

    def test_pairwise_definition(self):
        rng = np.random.default_rng(0)
        id_scores, ood_scores = rng.normal(1, 1, 40).round(1), rng.normal(0, 1, 30).round(1)
        wins = sum((i > o) + 0.5 * (i == o) for i in id_scores for o in ood_scores)
        assert Detector.auroc(id_scores, ood_scores) == pytest.approx(wins / (len(id_scores) * len(ood_scores)))

    def test_invariant_under_monotone_maps(self):
        rng = np.random.default_rng(1)
        id_scores, ood_scores = rng.normal(1, 1, 50), rng.normal(0, 1, 50)
        assert Detector.auroc(np.exp(id_scores) * 4 - 1, np.exp(ood_scores) * 4 - 1) == pytest.approx(Detector.auroc(id_scores, ood_scores))

    def test_swapping_the_sets_complements(self):
        rng = np.random.default_rng(2)
        id_scores, ood_scores = rng.normal(1, 1, 25), rng.normal(0, 1, 35)
        assert Detector.auroc(id_scores, ood_scores) + Detector.auroc(ood_scores, id_scores) == pytest.approx(1.0)

    def test_empty_set(self):
        with pytest.raises(ParameterError):
            Detector.auroc([], [1.0])


class TestChooseThreshold:

    def test_examples(self):
        scores = [float(s) for s in range(1, 21)]
        assert Detector.choose_threshold(scores, 0.95) == 2.0
        assert Detector.choose_threshold(scores, 1.0) == 1.0
        assert Detector.choose_threshold(scores, 0.05) == 20.0
        assert Detector.choose_threshold([4.0, -1.0, 7.0], 0.5) == 4.0

    def test_target_rate_is_reached(self):
        scores = np.random.default_rng(3).normal(size=997)
        for tpr in (0.5, 0.9, 0.95, 0.99):
            tau = Detector.choose_threshold(scores, tpr)
            assert np.mean(scores >= tau) >= tpr
            # the next larger score would miss the target
            above = scores[scores > tau]
            if len(above):
                assert np.mean(scores >= above.min()) < tpr

    def test_invalid_inputs(self):
        with pytest.raises(ParameterError):
            Detector.choose_threshold([1.0], 0.0)
        with pytest.raises(ParameterError):
            Detector.choose_threshold([], 0.95)

    def test_calibrate_sets_the_state(self, two_class_state):
        detector = Detector(two_class_state)
        assert detector.calibrate([float(s) for s in range(1, 21)]) == 2.0
        assert two_class_state.threshold == 2.0


class TestExport:

    def test_export_scores(self, tmp_path, two_class_state):
        path = tmp_path / 'scores.csv'
        Detector(two_class_state).export_scores(path, [-5.0, 0.25], threshold=-1.0)
        df = pd.read_csv(path)
        assert list(df.columns) == Detector.SCORE_COLUMNS
        assert df['sample_id'].tolist() == [0, 1]
        assert df['verdict'].tolist() == ['semantic_shift', 'in_distribution']
        assert '0.250000' in path.read_text()

    def test_state_dict_round_trip(self, two_class_state):
        two_class_state.threshold = -4.5
        restored = DetectorState.from_dict(two_class_state.to_dict())
        assert restored.threshold == -4.5
        assert sorted(restored.priors) == [0, 1]
        assert restored.priors[1].mean.tolist() == [2.0, 0.0]
