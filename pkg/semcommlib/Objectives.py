"""

    Objectives.py

        Training losses over received features z_hat = clamp(z) + eps:

        distortion  E[-log q_phi(y|z_hat)]                       averaged over the batch and L channel noise draws
        rate        KL(p(z_hat|x) || r(z_hat))                   r = N(0,I) (vib, vife) or r(z_hat|y) = N(mu_y, Sigma_y) (vlfe)
        penalty     sum_d p(d) ||grad_phi distortion_d||^2       gradient penalty through the classifier head only
        triplet     mean_anchors max(|z_r - z_m|^2 - |z_r - z_n|^2 + alpha, 0), nearest same-class / nearest other-class

        vife     = E_d[distortion_d + beta rate_d] + lambda penalty      (lambda=0: vib, beta=lambda=0: deepjscc)
        vlfe     = distortion + beta rate(class priors) + triplet      over the pooled batch
        combined = vlfe + lambda penalty

        Every assembly returns a LossBreakdown whose total is the exact affine combination of its components

"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence

import torch
from torch import autograd
from torch.nn import functional as F

from .AwgnChannel import AwgnChannel
from .TaskModel import GaussianPosterior, ReceivedPosterior, sample_latent
from .models import LossWeights, LossComponents
from .exceptions import ParameterError, NumericError, ContractViolation
from .settings import params as SETTINGS
from .utils import setup_logger

logger = setup_logger(__name__)


#### CLASS PRIORS ####

@dataclass
class ClassPrior:
    """ r(z_hat | y=c) = N(mean, covariance). covariance already carries the ridge epsilon """
    mean:torch.Tensor # k
    covariance:torch.Tensor # k x k
    epsilon:float = 0.0

    @classmethod
    def standard_normal(cls, latent_dim:int, dtype:torch.dtype=torch.float32) -> 'ClassPrior':
        return cls(mean=torch.zeros(latent_dim, dtype=dtype), covariance=torch.eye(latent_dim, dtype=dtype), epsilon=0.0)

    @classmethod
    def from_latents(cls, latents:torch.Tensor, ridge_scale:float=SETTINGS['PRIOR_RIDGE_SCALE'],
                     ridge_floor:float=SETTINGS['PRIOR_RIDGE_FLOOR']) -> 'ClassPrior':
        """ mean = E[z], covariance = E[z z^T] - mean mean^T + epsilon I """
        latents = latents.detach()
        if latents.ndim != 2 or len(latents) == 0:
            raise ParameterError(f'ClassPrior::from_latents(): Need a non-empty n x k latent matrix, got shape {tuple(latents.shape)}')

        mean = latents.mean(dim=0)
        scatter = latents.T @ latents / len(latents) - torch.outer(mean, mean)
        scatter = 0.5 * (scatter + scatter.T)
        epsilon = max(ridge_scale * float(torch.diagonal(scatter).mean()), ridge_floor)
        covariance = scatter + epsilon * torch.eye(latents.shape[1], dtype=latents.dtype)

        return cls(mean=mean, covariance=covariance, epsilon=epsilon)

    @property
    def latent_dim(self) -> int:
        return self.mean.shape[-1]

    def cholesky(self) -> torch.Tensor:
        factor, info = torch.linalg.cholesky_ex(self.covariance)
        if int(info) != 0:
            raise NumericError(f'ClassPrior::cholesky(): Covariance is not symmetric positive definite (leading minor {int(info)} failed)')
        return factor

    def log_density(self, z_hat:torch.Tensor) -> torch.Tensor:
        if z_hat.shape[-1] != self.latent_dim:
            raise ParameterError(f'ClassPrior::log_density(): Latent has {z_hat.shape[-1]} dims, prior has {self.latent_dim}')
        distribution = torch.distributions.MultivariateNormal(self.mean.to(z_hat.dtype), scale_tril=self.cholesky().to(z_hat.dtype))
        return distribution.log_prob(z_hat)

    def to(self, dtype:torch.dtype) -> 'ClassPrior':
        return ClassPrior(mean=self.mean.to(dtype), covariance=self.covariance.to(dtype), epsilon=self.epsilon)

    def to_dict(self) -> Dict[str, Any]:
        return { 'mean': self.mean.tolist(), 'covariance': self.covariance.tolist(), 'epsilon': self.epsilon }

    @classmethod
    def from_dict(cls, d:Mapping[str, Any], dtype:torch.dtype=torch.float32) -> 'ClassPrior':
        return cls(mean=torch.tensor(d['mean'], dtype=dtype), covariance=torch.tensor(d['covariance'], dtype=dtype), epsilon=float(d['epsilon']))


#### PRIMITIVES ####

def kl_diag_to_std_normal(variance:torch.Tensor, mean:torch.Tensor) -> torch.Tensor:
    """ 1/2 sum_i (m_i^2 + v_i - 1 - ln v_i), summed over the last dimension """
    if (variance <= 0).any():
        raise ParameterError('kl_diag_to_std_normal(): Variances must be strictly positive')
    return 0.5 * (mean ** 2 + variance - 1.0 - torch.log(variance)).sum(dim=-1)

def kl_diag_to_class_prior(variance:torch.Tensor, mean:torch.Tensor, prior:ClassPrior) -> torch.Tensor:
    """ KL(N(m, diag v) || N(mu_c, Sigma_c)), summed over the last dimension """
    if (variance <= 0).any():
        raise ParameterError('kl_diag_to_class_prior(): Variances must be strictly positive')

    prior = prior.to(mean.dtype)
    factor = prior.cholesky()
    precision = torch.cholesky_inverse(factor)
    k = mean.shape[-1]

    trace = (torch.diagonal(precision) * variance).sum(dim=-1)
    diff = prior.mean - mean
    mahalanobis = ((diff @ precision) * diff).sum(dim=-1)
    log_det = 2.0 * torch.log(torch.diagonal(factor)).sum()

    return 0.5 * (trace + mahalanobis - k + log_det - torch.log(variance).sum(dim=-1))

def distortion(logits:torch.Tensor, labels:torch.Tensor) -> torch.Tensor:
    """ Mean -log q(y|z_hat). logits: N x C or L x N x C (one slice per channel noise draw) """
    log_probs = F.log_softmax(logits, dim=-1)
    if log_probs.ndim == 3:
        labels = labels.expand(log_probs.shape[0], -1)
    return -log_probs.gather(-1, labels.unsqueeze(-1)).squeeze(-1).mean()

def irm_penalty(per_domain_losses:Mapping[int, torch.Tensor], head_params:Sequence[torch.Tensor],
                domain_weights:Mapping[int, float]=None) -> torch.Tensor:
    """
        sum_d p(d) ||grad_phi L_d||^2 with uniform p(d) unless domain_weights are given
        The inner gradient keeps its graph so the result is differentiable w.r.t. theta and phi
    """
    if len(per_domain_losses) == 0:
        raise ParameterError('irm_penalty(): Need at least one domain')

    head_params = list(head_params)
    domains = sorted(per_domain_losses.keys())
    total = None
    for d in domains:
        loss = per_domain_losses[d]
        if not loss.requires_grad:
            raise ContractViolation(f'irm_penalty(): Loss of domain {d} is not attached to a graph; the penalty needs grad w.r.t. the head parameters')
        weight = domain_weights[d] if domain_weights is not None else 1.0 / len(domains)
        grads = autograd.grad(loss, head_params, create_graph=True)
        squared_norm = sum((g ** 2).sum() for g in grads)
        total = weight * squared_norm if total is None else total + weight * squared_norm

    return total

@dataclass
class TripletResult:
    loss:torch.Tensor
    vacuous:bool # True when no anchor has both a same-class and an other-class partner
    num_anchors:int = 0

def triplet_loss(latents:torch.Tensor, labels:torch.Tensor, margin:float) -> TripletResult:
    """ Hard-in-batch mining: for every anchor the nearest same-class and the nearest other-class latent """

    diff = latents.unsqueeze(1) - latents.unsqueeze(0)
    sq_dist = (diff ** 2).sum(dim=-1)

    same = labels.unsqueeze(1) == labels.unsqueeze(0)
    not_self = ~torch.eye(len(labels), dtype=torch.bool, device=labels.device)
    match_mask = same & not_self
    non_match_mask = ~same
    anchors = match_mask.any(dim=1) & non_match_mask.any(dim=1)

    if not anchors.any():
        return TripletResult(loss=latents.sum() * 0.0, vacuous=True, num_anchors=0)

    d_match = sq_dist[anchors].masked_fill(~match_mask[anchors], math.inf).min(dim=1).values
    d_non_match = sq_dist[anchors].masked_fill(~non_match_mask[anchors], math.inf).min(dim=1).values

    loss = F.relu(d_match - d_non_match + margin).mean()
    return TripletResult(loss=loss, vacuous=False, num_anchors=int(anchors.sum()))


#### FORWARD PASS ####

@dataclass
class DomainForward:
    """ One batch through encoder, L power-projected noisy channel uses and the head """
    posterior:GaussianPosterior
    received:ReceivedPosterior
    z_hat:torch.Tensor # L x N x k
    log_probs:torch.Tensor # L x N x C
    labels:torch.Tensor # N

    @property
    def nll(self) -> torch.Tensor:
        """ per sample -(1/L) sum_l log q(y_n | z_hat_nl) """
        labels = self.labels.expand(self.log_probs.shape[0], -1).unsqueeze(-1)
        return -self.log_probs.gather(-1, labels).squeeze(-1).mean(dim=0)

def forward_domain(model, batch, channel:AwgnChannel, noise_samples:int, generator:torch.Generator=None) -> DomainForward:

    posterior = model.posterior(batch)
    z_hat = torch.stack([channel.transmit(sample_latent(posterior, generator), generator) for _ in range(noise_samples)])
    return DomainForward(posterior=posterior,
                         received=posterior.received(channel.noise_var),
                         z_hat=z_hat,
                         log_probs=model.classify(z_hat),
                         labels=batch.labels)


#### ASSEMBLIES ####

@dataclass
class LossBreakdown:
    total:torch.Tensor
    distortion:torch.Tensor
    rate:torch.Tensor
    penalty:torch.Tensor
    triplet:torch.Tensor
    weights:LossWeights
    per_domain_distortion:Dict[int, torch.Tensor] = field(default_factory=dict)
    latents:Optional[torch.Tensor] = None # first noise draw of z_hat, detached, for the prior refresh
    latent_labels:Optional[torch.Tensor] = None
    triplet_vacuous:bool = False

    def recompute_total(self) -> torch.Tensor:
        return self.distortion + self.weights.beta * self.rate + self.triplet + self.weights.lambda_ * self.penalty

    def components(self) -> LossComponents:
        return LossComponents(total=self.total.detach().item(), distortion=self.distortion.detach().item(), rate=self.rate.detach().item(),
                              penalty=self.penalty.detach().item(), triplet=self.triplet.detach().item())


def _as_domain_batches(batches) -> Dict[int, Any]:
    if isinstance(batches, Mapping):
        if len(batches) == 0:
            raise ParameterError('Need at least one domain batch')
        for d, batch in batches.items():
            if len(batch) == 0:
                raise ParameterError(f'Batch of domain {d} is empty')
        return { d: batches[d] for d in sorted(batches.keys()) }
    if len(batches) == 0:
        raise ParameterError('Empty batch')
    return { 0: batches }

def _forward_all(model, batches:Dict[int, Any], channel:AwgnChannel, weights:LossWeights, generator) -> Dict[int, DomainForward]:
    return { d: forward_domain(model, batch, channel, weights.noise_samples, generator) for d, batch in batches.items() }

def _penalty(model, forwards:Dict[int, DomainForward], lambda_:float) -> tuple:
    per_domain = { d: fw.nll.mean() for d, fw in forwards.items() }
    if lambda_ == 0:
        # no second-order graph when the multiplier switches the penalty off
        return torch.zeros((), dtype=next(iter(per_domain.values())).dtype), per_domain
    return irm_penalty(per_domain, model.head_parameters()), per_domain

def _class_prior_kl(received:ReceivedPosterior, labels:torch.Tensor, priors:Mapping[int, ClassPrior]) -> torch.Tensor:
    kl = torch.zeros(len(labels), dtype=received.mean.dtype)
    for c in sorted(int(c) for c in torch.unique(labels)):
        if c not in priors:
            raise ParameterError(f'vlfe: No class prior for class {c}')
        mask = labels == c
        kl = kl.index_put((mask.nonzero(as_tuple=True)[0],), kl_diag_to_class_prior(received.variance[mask], received.mean[mask], priors[c]))
    return kl

def _vlfe_terms(forwards:Dict[int, DomainForward], weights:LossWeights, priors:Mapping[int, ClassPrior]) -> dict:

    labels = torch.cat([fw.labels for fw in forwards.values()])
    received = ReceivedPosterior(mean=torch.cat([fw.received.mean for fw in forwards.values()]),
                                 variance=torch.cat([fw.received.variance for fw in forwards.values()]))
    latents = torch.cat([fw.z_hat[0] for fw in forwards.values()])

    triplet = triplet_loss(latents, labels, weights.margin)
    if triplet.vacuous:
        logger.warning('Objectives::vlfe(): Single-class batch, triplet term is 0')

    return {
        'distortion': torch.cat([fw.nll for fw in forwards.values()]).mean(),
        'rate': _class_prior_kl(received, labels, priors).mean(),
        'triplet': triplet,
        'latents': latents.detach(),
        'labels': labels,
    }


def vife_loss(batches:Mapping[int, Any], model, weights:LossWeights, channel:AwgnChannel, generator:torch.Generator=None) -> LossBreakdown:

    forwards = _forward_all(model, _as_domain_batches(batches), channel, weights, generator)

    distortions = torch.stack([fw.nll.mean() for fw in forwards.values()])
    rates = torch.stack([kl_diag_to_std_normal(fw.received.variance, fw.received.mean).mean() for fw in forwards.values()])
    penalty, per_domain = _penalty(model, forwards, weights.lambda_)

    distortion, rate = distortions.mean(), rates.mean()
    triplet = torch.zeros((), dtype=distortion.dtype)
    breakdown = LossBreakdown(total=distortion + weights.beta * rate + weights.lambda_ * penalty,
                              distortion=distortion, rate=rate, penalty=penalty, triplet=triplet, weights=weights,
                              per_domain_distortion=per_domain,
                              latents=torch.cat([fw.z_hat[0] for fw in forwards.values()]).detach(),
                              latent_labels=torch.cat([fw.labels for fw in forwards.values()]))
    return breakdown

def vlfe_loss(batch, model, weights:LossWeights, channel:AwgnChannel, priors:Mapping[int, ClassPrior], generator:torch.Generator=None) -> LossBreakdown:
    """ batch: a single batch or { domain: batch }; domain batches are pooled """

    forwards = _forward_all(model, _as_domain_batches(batch), channel, weights, generator)
    terms = _vlfe_terms(forwards, weights, priors)

    penalty = torch.zeros((), dtype=terms['distortion'].dtype)
    return LossBreakdown(total=terms['distortion'] + weights.beta * terms['rate'] + terms['triplet'].loss,
                         distortion=terms['distortion'], rate=terms['rate'], penalty=penalty, triplet=terms['triplet'].loss,
                         weights=weights.model_copy(update={ 'lambda_': 0.0 }),
                         latents=terms['latents'], latent_labels=terms['labels'], triplet_vacuous=terms['triplet'].vacuous)

def combined_loss(batches:Mapping[int, Any], model, weights:LossWeights, channel:AwgnChannel, priors:Mapping[int, ClassPrior],
                  generator:torch.Generator=None) -> LossBreakdown:

    forwards = _forward_all(model, _as_domain_batches(batches), channel, weights, generator)
    terms = _vlfe_terms(forwards, weights, priors)
    penalty, per_domain = _penalty(model, forwards, weights.lambda_)

    vlfe = terms['distortion'] + weights.beta * terms['rate'] + terms['triplet'].loss
    return LossBreakdown(total=vlfe + weights.lambda_ * penalty,
                         distortion=terms['distortion'], rate=terms['rate'], penalty=penalty, triplet=terms['triplet'].loss,
                         weights=weights, per_domain_distortion=per_domain,
                         latents=terms['latents'], latent_labels=terms['labels'], triplet_vacuous=terms['triplet'].vacuous)
