"""

    SemOracle.py

        Analytic linear-Gaussian remote regression model used as ground truth for the rest of the library:

        U_C ~ N(0, var_causal)
        Y   = U_C + n,      n   ~ N(0, var_label)
        U_S = Y + n_s,      n_s ~ N(0, spurious_gain * var_spurious)

        The receiver sees both features through an AWGN channel with variance var_channel
        and fits a two-coefficient least-squares regressor without intercept

"""

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
import pandas as pd

from .models import SemParams, SemSample, RegressionWeights, FeatureSet
from .exceptions import ParameterError, NumericError
from .settings import params as SETTINGS
from .utils import setup_logger


@dataclass(frozen=True)
class SemSampleSet:
    """ Column store of SemSamples. Indexing returns a SemSample """
    u_c:np.ndarray
    u_s:np.ndarray
    y:np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i:int) -> SemSample:
        return SemSample(u_c=float(self.u_c[i]), u_s=float(self.u_s[i]), y=float(self.y[i]))

    def __iter__(self) -> Iterator[SemSample]:
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def from_samples(cls, samples:Sequence[SemSample]) -> 'SemSampleSet':
        return cls(u_c=np.array([s.u_c for s in samples], dtype=np.float64),
                   u_s=np.array([s.u_s for s in samples], dtype=np.float64),
                   y=np.array([s.y for s in samples], dtype=np.float64))


class SemOracle:

    def __init__(self):
        self._setup_logger()

    #### SAMPLING ####

    def generate_sem_samples(self, params:SemParams, n:int, seed:int) -> SemSampleSet:

        self._check_params(params)
        if n < 1:
            raise ParameterError(f'SemOracle::generate_sem_samples(): Need at least one sample, got n={n}')

        rng = np.random.default_rng(seed)
        u_c = rng.normal(0.0, np.sqrt(params.var_causal), n)
        y = u_c + rng.normal(0.0, np.sqrt(params.var_label), n)
        u_s = y + rng.normal(0.0, np.sqrt(params.spurious_gain * params.var_spurious), n)

        return SemSampleSet(u_c=u_c, u_s=u_s, y=y)

    #### CLOSED FORMS ####

    def analytic_weights_causal_only(self, params:SemParams) -> RegressionWeights:

        self._check_params(params)
        denominator = params.var_causal + params.var_channel
        if denominator <= 0:
            raise ParameterError('SemOracle::analytic_weights_causal_only(): var_causal + var_channel must be positive')

        return RegressionWeights(w1=params.var_causal / denominator, w2=0.0)

    def analytic_weights_both(self, params:SemParams) -> RegressionWeights:
        """
            Exact least-squares weights on (U_C + eta_1, U_S + eta_2)
            With spurious_gain=2 these are the fractions

                w1 = (2 a b + c a) / (a (2b + s) + c (2a + 2b + c + s))
                w2 = (a s + c (a + s)) / (same)

            with a=var_causal, b=var_spurious, s=var_label, c=var_channel
        """
        self._check_params(params)
        a, s, c = params.var_causal, params.var_label, params.var_channel
        b = params.spurious_gain * params.var_spurious

        denominator = a * (b + s) + c * (2 * a + b + c + s)
        if denominator <= 0:
            raise ParameterError('SemOracle::analytic_weights_both(): Zero denominator, the features carry no variance')

        return RegressionWeights(w1=(a * b + c * a) / denominator,
                                 w2=(a * s + c * (a + s)) / denominator)

    def analytic_mse(self, params:SemParams, weights:RegressionWeights) -> float:
        """ Expected squared error of a given regressor under params """
        self._check_params(params)
        a, s, c = params.var_causal, params.var_label, params.var_channel
        b = params.spurious_gain * params.var_spurious
        w1, w2 = weights.w1, weights.w2

        return (1 - w1 - w2)**2 * a + w2**2 * b + (w1**2 + w2**2) * c + (w2 - 1)**2 * s

    #### EMPIRICAL FITS ####

    def fit_ols_remote(self, samples:SemSampleSet|Sequence[SemSample], var_channel:float, feature_set:FeatureSet, seed:int) -> RegressionWeights:

        if not isinstance(samples, SemSampleSet):
            samples = SemSampleSet.from_samples(list(samples))
        if len(samples) < 2:
            raise ParameterError('SemOracle::fit_ols_remote(): Need at least 2 samples')
        if var_channel < 0:
            raise ParameterError(f'SemOracle::fit_ols_remote(): Negative channel variance {var_channel}')

        rng = np.random.default_rng(seed)
        noise_std = np.sqrt(var_channel)
        received_c = samples.u_c + rng.normal(0.0, noise_std, len(samples))

        if FeatureSet(feature_set) == FeatureSet.causal_only:
            design = received_c[:, None]
        else:
            received_s = samples.u_s + rng.normal(0.0, noise_std, len(samples))
            design = np.stack([received_c, received_s], axis=1)

        gram = design.T @ design
        moment = design.T @ samples.y

        if np.linalg.matrix_rank(gram) < gram.shape[0]:
            raise NumericError(f'SemOracle::fit_ols_remote(): Singular normal equations for feature set "{FeatureSet(feature_set).value}": '
                               'the received features are (close to) constant or collinear. Use more samples or non-degenerate variances')

        w = np.linalg.solve(gram, moment)
        return RegressionWeights(w1=float(w[0]), w2=float(w[1]) if len(w) > 1 else 0.0)

    #### CONDITIONAL MUTUAL INFORMATION ####

    def conditional_mi(self, samples:np.ndarray, bins:int=SETTINGS['MI_DEFAULT_BINS']) -> float:
        """
            Plug-in estimate of I(D;Y|C) in nats
            samples: rows of (d, y, c). d is treated as discrete, y and c are discretized into equal-frequency bins
            (a column with at most `bins` distinct values keeps one bin per value, ties always share a bin)
        """
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim != 2 or samples.shape[1] != 3:
            raise ParameterError(f'SemOracle::conditional_mi(): Expected rows of (d, y, conditioner), got shape {samples.shape}')
        if bins < 2:
            raise ParameterError(f'SemOracle::conditional_mi(): Need at least 2 bins, got {bins}')

        _, domain_index = np.unique(samples[:, 0], return_inverse=True)
        num_domains = int(domain_index.max()) + 1 if len(domain_index) else 0
        if num_domains < 2:
            raise ParameterError('SemOracle::conditional_mi(): I(D;Y|C) is undefined for a single domain')

        y_bin = self._equal_frequency_bins(samples[:, 1], bins)
        c_bin = self._equal_frequency_bins(samples[:, 2], bins)

        flat = (c_bin * num_domains + domain_index) * bins + y_bin
        joint = np.bincount(flat, minlength=bins * num_domains * bins).reshape(bins, num_domains, bins).astype(np.float64)
        joint /= joint.sum()

        p_c = joint.sum(axis=(1, 2))
        p_cd = joint.sum(axis=2)
        p_cy = joint.sum(axis=1)

        nz = joint > 0
        c_idx, d_idx, y_idx = np.nonzero(nz)
        ratio = joint[nz] * p_c[c_idx] / (p_cd[c_idx, d_idx] * p_cy[c_idx, y_idx])
        mi = float(np.sum(joint[nz] * np.log(ratio)))

        return max(mi, 0.0)

    def _equal_frequency_bins(self, values:np.ndarray, bins:int) -> np.ndarray:
        # ranks only: any strictly monotone reparameterization gives the same bins
        distinct, inverse = np.unique(values, return_inverse=True)
        if len(distinct) <= bins:
            return inverse.reshape(-1) # discrete column, one bin per value
        # tied values share the rank of their first occurrence, hence one bin
        ranks = pd.Series(values).rank(method='min').to_numpy(dtype=np.int64) - 1
        return (ranks * bins) // len(values)

    #### UTILS ####

    def _check_params(self, params:SemParams):

        for name in ('var_causal', 'var_spurious', 'var_label', 'var_channel', 'spurious_gain'):
            value = getattr(params, name)
            if not np.isfinite(value) or value < 0:
                raise ParameterError(f'SemOracle: Parameter "{name}" must be a finite non-negative number, got {value}')

    def _setup_logger(self):
        self.logger = setup_logger(__name__)
