"""
    End-to-end behaviour on synthetic data: generalization under a reversed color bias,
    robustness across test PSNR, semantic-shift detection, objective trend and smoke runtime
"""

import time
from pathlib import Path

import numpy as np
import pytest
import torch

from semcommlib.AwgnChannel import AwgnChannel
from semcommlib.ColoredMnist import ColoredMnist, LabeledDataset
from semcommlib.Detector import Detector, DetectorState
from semcommlib.ExperimentRunner import ExperimentRunner
from semcommlib.Trainer import Trainer
from semcommlib.models import TrainConfig, ChannelConfig, LossWeights, ObjectiveSelector, EnvironmentSpec, EnvironmentRole, SweepKind

from conftest import make_raw_images, gaussian_blobs, write_idx

pytestmark = pytest.mark.slow

TRAIN_BIAS = (0.9, 0.8)
TEST_BIAS = 0.1
LABEL_NOISE = 0.25
TRAIN_PSNR = 10.0
EVALUATION_SLACK = 0.02 # binomial std of the 2000 test images is about 0.01

SMOKE_CONFIG = Path(__file__).resolve().parent.parent / 'configs' / 'smoke.yaml'


def accuracy_at(result, test_env:LabeledDataset, psnr_db:float) -> float:
    return Trainer().evaluate_accuracy(result.model, test_env, AwgnChannel.from_psnr(psnr_db), repeats=5, seed=7)


@pytest.fixture(scope='module')
def colored_domains() -> tuple:
    builder = ColoredMnist()
    raw = make_raw_images(6000, seed=31, size=8)
    train_envs = builder.build_environments(raw.subset(slice(0, 4000)), TRAIN_BIAS, LABEL_NOISE, seed=0)
    test_spec = EnvironmentSpec(bias_ratio=TEST_BIAS, label_noise=LABEL_NOISE, domain_index=len(TRAIN_BIAS), role=EnvironmentRole.test)
    test_env = builder.build_colored_environment(raw.subset(slice(4000, None)), test_spec, seed=2)
    return train_envs, test_env

@pytest.fixture(scope='module')
def trained(colored_domains) -> dict:
    """ Every objective trained once with the shipped weights, k=8 (0.83 ms) at 10 dB """
    train_envs, _ = colored_domains
    channel = ChannelConfig(p_max=1.0, noise_var=AwgnChannel.noise_var_for_psnr(1.0, TRAIN_PSNR))
    results = {}
    for selector in ObjectiveSelector:
        config = TrainConfig(epochs=15, domains=len(train_envs), batch_size=128, latent_dim=8, channel=channel,
                             weights=LossWeights(beta=1e-3, lambda_=1e4, margin=0.2, noise_samples=2),
                             objective=selector, learning_rate=1e-3, warmup_fraction=0.1, eval_repeats=1, seed=0)
        results[selector] = Trainer().train(config, train_envs)
    return results


class TestGeneralization:

    def test_baselines_follow_the_spurious_color(self, trained, colored_domains):
        _, test_env = colored_domains
        for selector in (ObjectiveSelector.deepjscc, ObjectiveSelector.vib):
            assert accuracy_at(trained[selector], test_env, TRAIN_PSNR) <= 0.35, selector.value

    def test_ordering(self, trained, colored_domains):
        """ proposed > invariance penalty alone > {vib, deepjscc} """
        _, test_env = colored_domains
        accuracy = { s: accuracy_at(trained[s], test_env, TRAIN_PSNR) for s in ObjectiveSelector }
        baselines = max(accuracy[ObjectiveSelector.deepjscc], accuracy[ObjectiveSelector.vib])
        proposed = max(accuracy[ObjectiveSelector.vife], accuracy[ObjectiveSelector.combined])

        assert accuracy[ObjectiveSelector.irm] >= baselines + 0.1
        assert proposed >= accuracy[ObjectiveSelector.irm] - EVALUATION_SLACK
        assert proposed >= baselines + 0.25

    @pytest.mark.parametrize('psnr_db', [0.0, 5.0, 10.0, 15.0, 20.0, 25.0])
    def test_combined_dominates_deepjscc_across_test_psnr(self, trained, colored_domains, psnr_db):
        _, test_env = colored_domains
        assert accuracy_at(trained[ObjectiveSelector.combined], test_env, psnr_db) > accuracy_at(trained[ObjectiveSelector.deepjscc], test_env, psnr_db)


class TestObjectiveTrend:

    @pytest.mark.parametrize('selector', list(ObjectiveSelector))
    def test_moving_average_ends_below_the_first_epoch(self, trained, selector):
        """ compared from the first epoch that trains the full objective (after the lambda warm-up) """
        epochs = trained[selector].record.epochs
        full = [e for e in epochs if e.lambda_active == epochs[-1].lambda_active]
        window = [e.losses.total for e in full[-10:]]
        assert np.mean(window) < full[0].losses.total


@pytest.fixture(scope='module')
def blob_detection() -> tuple:
    """ vlfe on two Gaussian classes; the semantic shift sits halfway between them """
    config = TrainConfig(epochs=30, domains=1, batch_size=128, latent_dim=8,
                         channel=ChannelConfig(p_max=1.0, noise_var=AwgnChannel.noise_var_for_psnr(1.0, TRAIN_PSNR)),
                         weights=LossWeights(beta=1e-3, lambda_=0.0, margin=0.2, noise_samples=2),
                         objective=ObjectiveSelector.vlfe, learning_rate=0.01, eval_repeats=1, seed=0)
    result = Trainer().train(config, [gaussian_blobs(1000, dim=4, separation=8.0, seed=41)])

    held_out = gaussian_blobs(1000, dim=4, separation=8.0, seed=42)
    features = torch.randn(2000, 4, generator=torch.Generator().manual_seed(43), dtype=torch.float64)
    features[:, 0] = 0.0
    shifted = LabeledDataset(features, torch.full((2000,), -1, dtype=torch.long))
    return result, held_out, shifted

def detection_auroc(result, held_out:LabeledDataset, shifted:LabeledDataset, psnr_db:float) -> float:
    trainer = Trainer()
    channel = AwgnChannel.from_psnr(psnr_db)
    detector = Detector(DetectorState(priors=result.priors))
    id_scores = detector.ood_score(trainer.received_latents(result.model, held_out, channel, seed=1))
    ood_scores = detector.ood_score(trainer.received_latents(result.model, shifted, channel, seed=2))
    return Detector.auroc(id_scores.tolist(), ood_scores.tolist())


class TestSemanticShiftDetection:

    def test_above_chance(self, blob_detection):
        assert detection_auroc(*blob_detection, psnr_db=20.0) > 0.75

    def test_does_not_fall_with_psnr(self, blob_detection):
        low, high = detection_auroc(*blob_detection, psnr_db=10.0), detection_auroc(*blob_detection, psnr_db=20.0)
        assert low > 0.5
        assert high >= low - 0.01


class TestSmokeRun:

    def test_smoke_config_finishes_within_a_minute(self, tmp_path, monkeypatch):
        raw = make_raw_images(1200, seed=51)
        write_idx(tmp_path / 'train-images-idx3-ubyte.gz', raw.images, compress=True)
        write_idx(tmp_path / 'train-labels-idx1-ubyte.gz', raw.labels, compress=True)
        monkeypatch.setenv(ExperimentRunner.DATA_ROOT_VAR, str(tmp_path))

        time_start = time.perf_counter()
        runner = ExperimentRunner(ExperimentRunner.load_config(SMOKE_CONFIG), run_dir=tmp_path / 'run')
        run_dir = runner.run()
        elapsed = time.perf_counter() - time_start

        assert (run_dir / ExperimentRunner.CSV_FILES[SweepKind.run]).is_file()
        assert not (run_dir / ExperimentRunner.FAILED_MARKER).exists()
        assert elapsed < 60.0
