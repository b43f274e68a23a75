"""

    Detector.py

        Semantic-shift detection on the server side:
        the score of a received latent is the largest class-conditional log-density max_c log N(z_hat; mu_c, Sigma_c)
        a score below the threshold tau flags the sample as semantic-shifted (score == tau is in-distribution)

"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Sequence

import numpy as np
import pandas as pd
import torch
from sklearn.metrics import roc_auc_score

from .Objectives import ClassPrior
from .models import Verdict
from .exceptions import ParameterError
from .settings import params as SETTINGS
from .utils import setup_logger, atomic_write_text


@dataclass
class DetectorState:
    priors:Dict[int, ClassPrior]
    threshold:float = -math.inf # tau in log-density units

    def __post_init__(self):
        if not self.priors:
            raise ParameterError('DetectorState: Need at least one class prior')

    def to_dict(self) -> Dict[str, Any]:
        return { 'priors': { int(c): p.to_dict() for c, p in self.priors.items() }, 'threshold': self.threshold }

    @classmethod
    def from_dict(cls, d:Mapping[str, Any]) -> 'DetectorState':
        return cls(priors={ int(c): ClassPrior.from_dict(p) for c, p in d['priors'].items() }, threshold=float(d['threshold']))


class Detector:

    SCORE_COLUMNS = ['sample_id', 'score', 'verdict']

    state:DetectorState = None
    score_transform:Callable[[torch.Tensor, torch.Tensor], torch.Tensor] = None # (scores, z_hat) -> weighted scores

    def __init__(self, state:DetectorState=None, score_transform:Callable[[torch.Tensor, torch.Tensor], torch.Tensor]=None):
        self._setup_logger()
        self.state = state
        self.score_transform = score_transform

    #### SCORING ####

    def ood_score(self, z_hat:torch.Tensor, priors:Mapping[int, ClassPrior]=None) -> torch.Tensor|float:
        """ z_hat: k-vector (returns a float) or N x k (returns N scores) """
        priors = priors if priors is not None else self._state().priors
        if not priors:
            raise ParameterError('Detector::ood_score(): No class priors')

        single = z_hat.ndim == 1
        z_hat = z_hat.unsqueeze(0) if single else z_hat
        log_densities = torch.stack([priors[c].log_density(z_hat) for c in sorted(priors.keys())])
        scores = log_densities.max(dim=0).values

        if self.score_transform is not None:
            scores = self.score_transform(scores, z_hat)

        return float(scores[0]) if single else scores

    @staticmethod
    def detect(score:float, threshold:float) -> Verdict:
        return Verdict.semantic_shift if score < threshold else Verdict.in_distribution

    def verdicts(self, scores:Sequence[float], threshold:float=None) -> list:
        threshold = threshold if threshold is not None else self._state().threshold
        return [self.detect(float(s), threshold) for s in scores]

    #### EVALUATION ####

    @staticmethod
    def auroc(id_scores:Sequence[float], ood_scores:Sequence[float]) -> float:
        """ Area under the ROC with in-distribution as the positive class, ties count 1/2 """
        id_scores, ood_scores = np.asarray(id_scores, dtype=np.float64).ravel(), np.asarray(ood_scores, dtype=np.float64).ravel()
        if len(id_scores) == 0 or len(ood_scores) == 0:
            raise ParameterError('Detector::auroc(): Need at least one in-distribution and one semantic-shift score')

        y_true = np.concatenate([np.ones(len(id_scores)), np.zeros(len(ood_scores))])
        y_scores = np.concatenate([id_scores, ood_scores])
        return float(roc_auc_score(y_true, y_scores))

    @staticmethod
    def choose_threshold(id_scores:Sequence[float], target_tpr:float=SETTINGS['DETECTOR_TARGET_TPR']) -> float:
        """ Largest tau with at least target_tpr of the in-distribution scores >= tau """
        if not 0 < target_tpr <= 1:
            raise ParameterError(f'Detector::choose_threshold(): target TPR must be in (0, 1], got {target_tpr}')
        scores = np.sort(np.asarray(id_scores, dtype=np.float64).ravel())[::-1]
        if len(scores) == 0:
            raise ParameterError('Detector::choose_threshold(): No in-distribution scores')

        needed = math.ceil(target_tpr * len(scores) - 1e-12)
        return float(scores[max(needed, 1) - 1])

    def calibrate(self, id_scores:Sequence[float], target_tpr:float=SETTINGS['DETECTOR_TARGET_TPR']) -> float:
        state = self._state()
        state.threshold = self.choose_threshold(id_scores, target_tpr)
        self.logger.info(f'Detector::calibrate(): tau={state.threshold:.4f} at TPR {target_tpr:.2f} over {len(id_scores)} scores')
        return state.threshold

    #### EXPORT ####

    def export_scores(self, path:str|Path, scores:Sequence[float], threshold:float=None) -> pd.DataFrame:
        scores = np.asarray(scores, dtype=np.float64).ravel()
        df = pd.DataFrame({
            'sample_id': np.arange(len(scores)),
            'score': scores,
            'verdict': [v.value for v in self.verdicts(scores, threshold)],
        }, columns=self.SCORE_COLUMNS)
        atomic_write_text(path, df.to_csv(index=False, float_format=SETTINGS['CSV_FLOAT_FORMAT']))
        return df

    #### UTILS ####

    def _state(self) -> DetectorState:
        if self.state is None:
            raise ParameterError('Detector: No detector state; train a model or load a checkpoint with priors first')
        return self.state

    def _setup_logger(self):
        self.logger = setup_logger(__name__)
