import math

import pytest
import torch

from semcommlib.AwgnChannel import AwgnChannel
from semcommlib.models import ChannelConfig
from semcommlib.exceptions import ParameterError


class TestPsnr:

    @pytest.mark.parametrize('p_max, noise_var, expected', [(1, 0.1, 10), (1, 0.01, 20), (0.5, 0.5, 0)])
    def test_psnr_db(self, p_max, noise_var, expected):
        assert AwgnChannel.psnr_db(ChannelConfig(p_max=p_max, noise_var=noise_var)) == pytest.approx(expected)

    def test_noiseless_channel_has_infinite_psnr(self):
        assert AwgnChannel.psnr_db(ChannelConfig(p_max=1, noise_var=0)) == math.inf

    @pytest.mark.parametrize('p_max, psnr, expected', [(1, 10, 0.1), (1, 0, 1.0), (4, 13, 4 * 10 ** -1.3)])
    def test_noise_var_for_psnr(self, p_max, psnr, expected):
        assert AwgnChannel.noise_var_for_psnr(p_max, psnr) == pytest.approx(expected, rel=1e-12)

    def test_round_trip(self):
        for psnr in (-5.0, 0.0, 3.3, 10.0, 25.0):
            noise_var = AwgnChannel.noise_var_for_psnr(2.0, psnr)
            assert abs(AwgnChannel.psnr_db(ChannelConfig(p_max=2.0, noise_var=noise_var)) - psnr) < 1e-9

    def test_from_psnr(self):
        channel = AwgnChannel.from_psnr(10, p_max=1)
        assert channel.noise_var == pytest.approx(0.1)
        assert channel.p_max == 1

    def test_nonpositive_power(self):
        with pytest.raises(ParameterError):
            AwgnChannel.noise_var_for_psnr(0, 10)


class TestPowerProject:

    def test_feasible_vector_is_unchanged(self):
        z = torch.tensor([0.5, -0.5])
        assert torch.equal(AwgnChannel.power_project(z, 1.0), z)

    def test_clamps_each_dimension(self):
        assert AwgnChannel.power_project(torch.tensor([2.0, -3.0]), 1.0).tolist() == [1.0, -1.0]

    def test_bound_idempotent_and_non_expansive(self):
        z = torch.randn(1000, generator=torch.Generator().manual_seed(0)) * 3
        projected = AwgnChannel.power_project(z, 2.0)
        assert (projected ** 2 <= 2.0 + 1e-6).all()
        assert torch.equal(AwgnChannel.power_project(projected, 2.0), projected)
        assert ((projected - AwgnChannel.power_project(z.flip(0), 2.0)).abs() <= (z - z.flip(0)).abs()).all()


class TestTransmit:

    def test_noiseless_is_projection(self):
        channel = AwgnChannel(ChannelConfig(p_max=1, noise_var=0))
        z = torch.tensor([[2.0, 0.3, -4.0]])
        assert torch.equal(channel.transmit(z), AwgnChannel.power_project(z, 1))

    def test_noise_variance(self):
        channel = AwgnChannel(ChannelConfig(p_max=1, noise_var=1))
        received = channel.transmit(torch.zeros(1_000_000, 2, dtype=torch.float64), torch.Generator().manual_seed(0))
        assert (received.var(dim=0) - 1.0).abs().max() < 0.01

    def test_expectation_is_preserved(self):
        channel = AwgnChannel(ChannelConfig(p_max=1, noise_var=0.5))
        z = torch.tensor([0.3, -0.7], dtype=torch.float64)
        received = channel.transmit(z.expand(100_000, 2), torch.Generator().manual_seed(1))
        assert ((received.mean(dim=0) - z).abs() < 4 * math.sqrt(0.5) / math.sqrt(100_000)).all()

    def test_deterministic_per_generator_state(self):
        channel = AwgnChannel(ChannelConfig(noise_var=0.1))
        z = torch.zeros(3, 4)
        assert torch.equal(channel.transmit(z, torch.Generator().manual_seed(5)), channel.transmit(z, torch.Generator().manual_seed(5)))


class TestLatency:

    @pytest.mark.parametrize('latent_dim, expected', [(96, 10.0), (48, 5.0), (16, 1.6667)])
    def test_latency_ms(self, latent_dim, expected):
        assert AwgnChannel.latency_ms(latent_dim) == pytest.approx(expected, abs=1e-3)

    @pytest.mark.parametrize('latent_dim', [0, 9.6, -3])
    def test_invalid_latent_dim(self, latent_dim):
        with pytest.raises(ParameterError):
            AwgnChannel.latency_ms(latent_dim)


class TestChannelConfig:

    def test_invariants(self):
        with pytest.raises(ValueError):
            ChannelConfig(p_max=0)
        with pytest.raises(ValueError):
            ChannelConfig(noise_var=-0.1)
