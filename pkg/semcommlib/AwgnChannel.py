"""

    AwgnChannel.py

        Additive white Gaussian noise channel with a per-dimension peak power constraint
        z_hat = clamp(z, +-sqrt(p_max)) + eps, eps ~ N(0, noise_var I)

"""

import math

import torch

from .models import ChannelConfig
from .exceptions import ParameterError
from .settings import params as SETTINGS


class AwgnChannel:

    config:ChannelConfig = None

    def __init__(self, config:ChannelConfig=None):
        self.config = config or ChannelConfig()

    @classmethod
    def from_psnr(cls, psnr_db:float, p_max:float=1.0) -> 'AwgnChannel':
        return cls(ChannelConfig(p_max=p_max, noise_var=cls.noise_var_for_psnr(p_max, psnr_db)))

    #### PSNR ACCOUNTING ####

    @staticmethod
    def psnr_db(config:ChannelConfig) -> float:
        """ 10 log10(p_max / noise_var). A noiseless channel returns +inf """
        if config.noise_var == 0:
            return math.inf
        return 10.0 * math.log10(config.p_max / config.noise_var)

    @staticmethod
    def noise_var_for_psnr(p_max:float, psnr_db:float) -> float:
        if p_max <= 0:
            raise ParameterError(f'AwgnChannel::noise_var_for_psnr(): p_max must be positive, got {p_max}')
        return p_max * 10.0 ** (-psnr_db / 10.0)

    @staticmethod
    def latency_ms(latent_dim:int) -> float:
        """ One channel use per REAL_DIMS_PER_SYMBOL latent dimensions at SYMBOL_RATE_BAUD """
        if int(latent_dim) != latent_dim or latent_dim < 1:
            raise ParameterError(f'AwgnChannel::latency_ms(): Latent dimension must be a positive integer, got {latent_dim}')
        symbols = latent_dim / SETTINGS['REAL_DIMS_PER_SYMBOL']
        return symbols / SETTINGS['SYMBOL_RATE_BAUD'] * 1000.0

    #### TRANSMISSION ####

    @staticmethod
    def power_project(z:torch.Tensor, p_max:float) -> torch.Tensor:
        bound = math.sqrt(p_max)
        return torch.clamp(z, -bound, bound)

    def transmit(self, z:torch.Tensor, generator:torch.Generator=None) -> torch.Tensor:

        projected = self.power_project(z, self.config.p_max)
        if self.config.noise_var == 0:
            return projected

        noise = torch.randn(projected.shape, generator=generator, dtype=projected.dtype, device=projected.device)
        return projected + math.sqrt(self.config.noise_var) * noise

    @property
    def noise_var(self) -> float:
        return self.config.noise_var

    @property
    def p_max(self) -> float:
        return self.config.p_max
