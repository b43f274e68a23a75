"""

    TaskModel.py

        Device side stochastic featurizer (theta) and server side classifier head (phi)

        FeatureEncoder: x -> GaussianPosterior(mean, std)
            images: 2 conv blocks (32, 64 channels, kernel 3, stride 2, ReLU) + linear map to 2k outputs
            vectors: linear map to 2k outputs
            mean = sqrt(p_max) * tanh(raw), std = max(softplus(raw), STD_FLOOR)
        ClassifierHead: single linear layer to C logits, log-softmax output

        Checkpoints are a single torch.save archive:
            { format_version, encoder: {layer: tensor}, head: {layer: tensor}, architecture: {...}, config: {...}, detector: {...} | None }

"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Tuple

import torch
from torch import nn
from torch.nn import functional as F

from .exceptions import NumericError, ParameterError
from .settings import params as SETTINGS


@dataclass
class GaussianPosterior:
    """ p_theta(z|x) for a batch: mean and std are N x k """
    mean:torch.Tensor
    std:torch.Tensor

    @property
    def variance(self) -> torch.Tensor:
        return self.std ** 2

    def received(self, noise_var:float) -> 'ReceivedPosterior':
        return effective_received_posterior(self, noise_var)

@dataclass
class ReceivedPosterior:
    """ Marginal of z_hat = z + eps: mean unchanged, variance std^2 + noise_var """
    mean:torch.Tensor
    variance:torch.Tensor


def sample_latent(posterior:GaussianPosterior, generator:torch.Generator=None) -> torch.Tensor:
    """ Reparameterized draw z = mean + std * eps. Gradients flow through mean and std only """
    eps = torch.randn(posterior.mean.shape, generator=generator, dtype=posterior.mean.dtype, device=posterior.mean.device)
    return posterior.mean + posterior.std * eps

def effective_received_posterior(posterior:GaussianPosterior, noise_var:float) -> ReceivedPosterior:
    if noise_var < 0:
        raise ParameterError(f'effective_received_posterior(): Negative noise variance {noise_var}')
    return ReceivedPosterior(mean=posterior.mean, variance=posterior.variance + noise_var)


#### NETWORKS ####

class FeatureEncoder(nn.Module):

    CONV_CHANNELS = (32, 64)

    def __init__(self, input_shape:Tuple[int, ...], latent_dim:int, p_max:float=1.0, std_floor:float=SETTINGS['POSTERIOR_STD_FLOOR']):
        super().__init__()
        self.input_shape = tuple(input_shape)
        self.latent_dim = latent_dim
        self.p_max = p_max
        self.std_floor = std_floor

        if len(self.input_shape) == 3:
            channels, rows, cols = self.input_shape
            c1, c2 = self.CONV_CHANNELS
            self.backbone = nn.Sequential(
                nn.Conv2d(channels, c1, kernel_size=3, stride=2, padding=1), nn.ReLU(),
                nn.Conv2d(c1, c2, kernel_size=3, stride=2, padding=1), nn.ReLU(),
                nn.Flatten(),
            )
            flat_dim = c2 * self._conv_out(self._conv_out(rows)) * self._conv_out(self._conv_out(cols))
        else:
            self.backbone = nn.Flatten()
            flat_dim = math.prod(self.input_shape)

        self.projection = nn.Linear(flat_dim, 2 * latent_dim)

    def forward(self, x:torch.Tensor) -> GaussianPosterior:

        raw = self.projection(self.backbone(x))
        if not torch.isfinite(raw).all():
            raise NumericError('FeatureEncoder::forward(): Non-finite activations in the encoder output')

        raw_mean, raw_std = raw[:, :self.latent_dim], raw[:, self.latent_dim:]
        mean = math.sqrt(self.p_max) * torch.tanh(raw_mean)
        std = F.softplus(raw_std).clamp_min(self.std_floor)
        return GaussianPosterior(mean=mean, std=std)

    def _conv_out(self, size:int) -> int:
        return (size + 2 * 1 - 3) // 2 + 1


class ClassifierHead(nn.Module):

    def __init__(self, latent_dim:int, num_classes:int):
        super().__init__()
        self.linear = nn.Linear(latent_dim, num_classes)

    def logits(self, z_hat:torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(z_hat).all():
            raise NumericError('ClassifierHead::logits(): Non-finite received features')
        return self.linear(z_hat)

    def forward(self, z_hat:torch.Tensor) -> torch.Tensor:
        """ log q_phi(y | z_hat) for every class """
        return F.log_softmax(self.logits(z_hat), dim=-1)


class TaskModel(nn.Module):
    """ Encoder (device) + head (server). The channel sits between them and is owned by the caller """

    CHECKPOINT_FORMAT_VERSION = 1

    def __init__(self, input_shape:Tuple[int, ...], latent_dim:int, num_classes:int=2, p_max:float=1.0):
        super().__init__()
        self.encoder = FeatureEncoder(input_shape, latent_dim, p_max=p_max)
        self.head = ClassifierHead(latent_dim, num_classes)
        self.num_classes = num_classes

    @property
    def latent_dim(self) -> int:
        return self.encoder.latent_dim

    def posterior(self, batch) -> GaussianPosterior:
        """ batch: LabeledDataset """
        return self.encoder(batch.x.to(self.dtype))

    def encode(self, x:torch.Tensor) -> GaussianPosterior:
        return self.encoder(x)

    def classify(self, z_hat:torch.Tensor) -> torch.Tensor:
        return self.head(z_hat)

    def head_parameters(self):
        return list(self.head.parameters())

    @property
    def dtype(self) -> torch.dtype:
        return self.head.linear.weight.dtype

    #### CHECKPOINTS ####

    def save_checkpoint(self, path:str|Path, config:Dict[str, Any]=None, detector:Dict[str, Any]=None):

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp_path = path.with_suffix(path.suffix + '.tmp')
        torch.save({
            'format_version': self.CHECKPOINT_FORMAT_VERSION,
            'architecture': { 'input_shape': list(self.encoder.input_shape), 'latent_dim': self.latent_dim,
                              'num_classes': self.num_classes, 'p_max': self.encoder.p_max },
            'encoder': { k: v.detach().cpu() for k, v in self.encoder.state_dict().items() },
            'head': { k: v.detach().cpu() for k, v in self.head.state_dict().items() },
            'config': config or {},
            'detector': detector,
        }, tmp_path)
        tmp_path.replace(path)

    @classmethod
    def load_checkpoint(cls, path:str|Path) -> Tuple['TaskModel', Dict[str, Any]]:
        """ Returns the model and the raw archive (for config and detector state) """
        archive = torch.load(path, map_location='cpu', weights_only=False)
        architecture = archive['architecture']
        model = cls(tuple(architecture['input_shape']), architecture['latent_dim'], architecture['num_classes'], architecture['p_max'])
        model.encoder.load_state_dict(archive['encoder'])
        model.head.load_state_dict(archive['head'])
        return model, archive


class CausalOracle(nn.Module):
    """
        Label oracle: knows the clean label y0 (the causal feature) and transmits it as +-sqrt(p_max) on the first latent dimension
        Used for the 1 - rho accuracy bound through the full channel pipeline
    """

    def __init__(self, latent_dim:int=1, num_classes:int=2, p_max:float=1.0):
        super().__init__()
        self.latent_dim = latent_dim
        self.num_classes = num_classes
        self.p_max = p_max
        self.head = ClassifierHead(latent_dim, num_classes)
        with torch.no_grad():
            self.head.linear.weight.zero_()
            self.head.linear.bias.zero_()
            self.head.linear.weight[1, 0] = 1.0 # class 1 for positive first coordinate

    def posterior(self, batch) -> GaussianPosterior:
        n = len(batch)
        mean = torch.zeros(n, self.latent_dim)
        mean[:, 0] = math.sqrt(self.p_max) * (2.0 * batch.clean_labels.float() - 1.0)
        return GaussianPosterior(mean=mean, std=torch.full((n, self.latent_dim), SETTINGS['POSTERIOR_STD_FLOOR']))

    def classify(self, z_hat:torch.Tensor) -> torch.Tensor:
        return self.head(z_hat)
