"""

    Trainer.py

        Training loop over D domain environments:

        for every epoch t:
            lambda = 0 during warm-up, then the configured value
            for every step: one batch per domain -> L channel noise draws per datapoint
                            -> objective over all domain batches -> Adam step on (theta, phi)
            refresh the class priors r_t(z_hat|y=c) from the latents seen in epoch t
            evaluate, append one EpochRecord (and one jsonl line under the run directory)

        Epoch 1 uses standard normal class priors
        Two snapshots are kept: best train-domain validation accuracy and best test-domain accuracy

"""

import copy
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import torch

from .AwgnChannel import AwgnChannel
from .ColoredMnist import ColoredMnist, LabeledDataset
from .TaskModel import TaskModel
from .Objectives import ClassPrior, LossBreakdown, vife_loss, vlfe_loss, combined_loss
from .models import TrainConfig, ObjectiveSelector, LossWeights, LossComponents, EpochRecord, RunRecord, ModelSelection
from .exceptions import ConfigError, ParameterError
from .settings import params as SETTINGS
from .utils import setup_logger, derive_seed

EVAL_CHUNK_SIZE = 1024


@dataclass
class Snapshot:
    epoch:int
    accuracy:float
    state:Dict[str, torch.Tensor]
    priors:Dict[int, ClassPrior]

@dataclass
class TrainResult:
    model:TaskModel # trained in place: (theta*, phi*)
    priors:Dict[int, ClassPrior]
    record:RunRecord
    snapshots:Dict[ModelSelection, Snapshot] = field(default_factory=dict)

    def selected(self, selection:ModelSelection) -> tuple:
        """ Copy of the model and priors at the selected epoch. Falls back to the final state """
        snapshot = self.snapshots.get(selection)
        if snapshot is None:
            return self.model, self.priors
        model = copy.deepcopy(self.model)
        model.load_state_dict(snapshot.state)
        return model, snapshot.priors


class Trainer:

    RECORD_FILE = 'record.jsonl'

    run_dir:Path = None # epoch records go here when set

    def __init__(self, run_dir:str|Path=None):
        self._setup_logger()
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.data = ColoredMnist()

    #### OBJECTIVE SELECTION ####

    @staticmethod
    def effective_weights(objective:ObjectiveSelector, weights:LossWeights) -> LossWeights:
        """ Zero the multipliers a selector does not use """
        objective = ObjectiveSelector(objective)
        update = {}
        if objective in (ObjectiveSelector.deepjscc, ObjectiveSelector.irm):
            update['beta'] = 0.0
        if not objective.uses_penalty():
            update['lambda_'] = 0.0
        return weights.model_copy(update=update)

    def objective(self, selector:ObjectiveSelector, batches:Mapping[int, LabeledDataset], model, weights:LossWeights,
                  channel:AwgnChannel, priors:Mapping[int, ClassPrior], generator:torch.Generator) -> LossBreakdown:

        if selector == ObjectiveSelector.vlfe:
            return vlfe_loss(batches, model, weights, channel, priors, generator)
        if selector == ObjectiveSelector.combined:
            return combined_loss(batches, model, weights, channel, priors, generator)
        return vife_loss(batches, model, weights, channel, generator)

    #### TRAINING ####

    def train(self, config:TrainConfig, train_envs:Sequence[LabeledDataset], model:TaskModel=None,
              val_envs:Sequence[LabeledDataset]=None, test_env:LabeledDataset=None) -> TrainResult:
        """
            Run the training loop. A given model is trained in place, otherwise one is
            initialized from config.seed. Fully deterministic for a given config
        """
        self._check_config(config, train_envs)

        selector = ObjectiveSelector(config.objective)
        if model is None:
            torch.manual_seed(config.seed)
            model = TaskModel(train_envs[0].input_shape, config.latent_dim, config.num_classes, config.channel.p_max)

        weights = self.effective_weights(selector, config.weights)
        channel = AwgnChannel(config.channel)
        generator = torch.Generator().manual_seed(config.seed)
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)

        priors = { c: ClassPrior.standard_normal(config.latent_dim, model.dtype) for c in range(config.num_classes) }
        record = RunRecord(config=config.model_dump(mode='json', by_alias=True))
        result = TrainResult(model=model, priors=priors, record=record)
        warmup_epochs = int(config.warmup_fraction * config.epochs)

        self._reset_record_file()
        self.logger.info(f'**** Trainer::train(): {selector.value} over {len(train_envs)} domains, {config.epochs} epochs, k={config.latent_dim}, '
                         f'noise_var={config.channel.noise_var:.4g}, beta={weights.beta:g}, lambda={weights.lambda_:g} ****')
        time_start = time.time()

        for epoch in range(1, config.epochs + 1):

            lambda_active = 0.0 if epoch <= warmup_epochs else weights.lambda_
            epoch_weights = weights.model_copy(update={ 'lambda_': lambda_active })

            model.train()
            totals = LossComponents()
            num_steps = 0
            latents, latent_labels = [], []

            for batches in self._domain_batches(train_envs, config.batch_size, config.seed, epoch):
                optimizer.zero_grad()
                breakdown = self.objective(selector, batches, model, epoch_weights, channel, priors, generator)
                breakdown.total.backward()
                optimizer.step()

                totals = self._accumulate(totals, breakdown.components())
                num_steps += 1
                latents.append(breakdown.latents)
                latent_labels.append(breakdown.latent_labels)

            # priors for epoch t+1 only depend on the latents of epoch t
            priors = self.update_class_priors(self._group_by_class(latents, latent_labels), previous=priors)
            result.priors = priors

            model.eval()
            train_accuracy = self.evaluate_accuracy(model, LabeledDataset.concat(train_envs), channel, config.eval_repeats, seed=derive_seed(config.seed, f'eval:train:{epoch}'))
            val_accuracy = self.evaluate_accuracy(model, LabeledDataset.concat(val_envs), channel, config.eval_repeats, seed=derive_seed(config.seed, f'eval:val:{epoch}')) if val_envs else None
            test_accuracy = self.evaluate_accuracy(model, test_env, channel, config.eval_repeats, seed=derive_seed(config.seed, f'eval:test:{epoch}')) if test_env is not None else None

            epoch_record = EpochRecord(epoch=epoch, lambda_active=lambda_active,
                                       losses=self._mean(totals, num_steps),
                                       train_accuracy=train_accuracy, val_accuracy=val_accuracy, test_accuracy=test_accuracy)
            record.epochs.append(epoch_record)
            self._write_epoch(epoch_record)

            self._update_snapshot(result, ModelSelection.train_domain, epoch, val_accuracy if val_accuracy is not None else train_accuracy, priors)
            if test_accuracy is not None:
                self._update_snapshot(result, ModelSelection.test_domain, epoch, test_accuracy, priors)

            self.logger.info(f'Trainer::train(): epoch {epoch}/{config.epochs} lambda={lambda_active:g} loss={epoch_record.losses.total:.4f} '
                             f'train_acc={train_accuracy:.4f} val_acc={self._fmt(val_accuracy)} test_acc={self._fmt(test_accuracy)}')

        record.final_priors = { c: prior.to_dict() for c, prior in priors.items() }
        record.selected_epochs = { selection: snapshot.epoch for selection, snapshot in result.snapshots.items() }
        record.wall_clock_s = time.time() - time_start

        self.logger.info(f'**** Trainer::train(): Finished in {record.wall_clock_s:.1f}s ****')
        return result

    #### PRIORS ####

    def update_class_priors(self, latents_by_class:Mapping[int, torch.Tensor], previous:Mapping[int, ClassPrior]=None) -> Dict[int, ClassPrior]:
        """ Empirical mean and ridged covariance per class. A class without latents keeps its previous prior """
        previous = previous or {}
        priors = {}
        for c in sorted(set(latents_by_class.keys()) | set(previous.keys())):
            latents = latents_by_class.get(c)
            if latents is None or len(latents) == 0:
                if c in previous:
                    self.logger.warning(f'Trainer::update_class_priors(): No latents for class {c}, keeping the previous prior')
                    priors[c] = previous[c]
                else:
                    self.logger.warning(f'Trainer::update_class_priors(): No latents and no previous prior for class {c}, skipped')
                continue
            priors[c] = ClassPrior.from_latents(latents, SETTINGS['PRIOR_RIDGE_SCALE'], SETTINGS['PRIOR_RIDGE_FLOOR'])
        return priors

    #### EVALUATION ####

    def evaluate_accuracy(self, model, dataset:LabeledDataset, channel:AwgnChannel, repeats:int=SETTINGS['DEFAULT_EVAL_REPEATS'], seed:int=0) -> float:
        """ Top-1 accuracy of the modal prediction over repeats transmissions of the posterior mean """
        if repeats < 1:
            raise ParameterError(f'Trainer::evaluate_accuracy(): Need at least one repeat, got {repeats}')
        if len(dataset) == 0:
            self.logger.warning('Trainer::evaluate_accuracy(): Empty dataset')
            return float('nan')

        predictions = self.predict(model, dataset, channel, repeats, seed)
        return float((predictions == dataset.labels).double().mean())

    def predict(self, model, dataset:LabeledDataset, channel:AwgnChannel, repeats:int, seed:int) -> torch.Tensor:
        generator = torch.Generator().manual_seed(seed)
        modal = []
        with torch.no_grad():
            for start in range(0, len(dataset), EVAL_CHUNK_SIZE):
                mean = model.posterior(dataset.subset(slice(start, start + EVAL_CHUNK_SIZE))).mean
                votes = torch.stack([model.classify(channel.transmit(mean, generator)).argmax(dim=-1) for _ in range(repeats)])
                modal.append(torch.mode(votes, dim=0).values)
        return torch.cat(modal)

    def received_latents(self, model, dataset:LabeledDataset, channel:AwgnChannel, seed:int) -> torch.Tensor:
        """ One transmission of the posterior mean per sample, as seen by the server """
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            return torch.cat([channel.transmit(model.posterior(dataset.subset(slice(start, start + EVAL_CHUNK_SIZE))).mean, generator)
                              for start in range(0, len(dataset), EVAL_CHUNK_SIZE)]) if len(dataset) else torch.zeros(0, model.latent_dim)

    #### CHECKPOINTS ####

    def save_checkpoints(self, result:TrainResult, run_dir:str|Path, primary:ModelSelection=ModelSelection.train_domain,
                         config:Mapping=None, detectors:Mapping[ModelSelection, Mapping]=None) -> Dict[str, Path]:
        """ checkpoint.pt (primary selection) plus one checkpoint_<selection>.pt per snapshot """
        run_dir = Path(run_dir)
        config = dict(config) if config is not None else { 'train': result.record.config }
        detectors = detectors or {}
        paths = {}
        for selection in result.snapshots:
            model, _ = result.selected(selection)
            path = run_dir / f'checkpoint_{selection.value}.pt'
            model.save_checkpoint(path, config=config, detector=detectors.get(selection))
            paths[selection.value] = path

        model, _ = result.selected(primary)
        path = run_dir / 'checkpoint.pt'
        model.save_checkpoint(path, config=config, detector=detectors.get(primary))
        paths['primary'] = path
        return paths

    #### UTILS ####

    def _check_config(self, config:TrainConfig, train_envs:Sequence[LabeledDataset]):
        selector = ObjectiveSelector(config.objective)
        if len(train_envs) != config.domains:
            raise ConfigError(f'Trainer::train(): Config declares {config.domains} domains but {len(train_envs)} environments were given',
                              [f'domains: expected {len(train_envs)}'])
        if selector.uses_penalty() and config.domains < 2:
            raise ConfigError(f'Trainer::train(): Objective "{selector.value}" needs at least 2 domains for its invariance penalty',
                              [f'domains: {config.domains} < 2 with objective {selector.value}'])
        for i, env in enumerate(train_envs):
            if len(env) == 0:
                raise ConfigError(f'Trainer::train(): Training environment {i} is empty', [f'train_envs[{i}]: empty'])

    def _domain_batches(self, train_envs:Sequence[LabeledDataset], batch_size:int, seed:int, epoch:int):
        """ One batch per domain per step; stops at the shortest domain """
        iterators = [self.data.batch_iterator(env, batch_size, derive_seed(seed, f'batches:{epoch}:{d}')) for d, env in enumerate(train_envs)]
        for batches in zip(*iterators):
            yield { d: batch for d, batch in enumerate(batches) }

    def _group_by_class(self, latents:List[torch.Tensor], labels:List[torch.Tensor]) -> Dict[int, torch.Tensor]:
        if not latents:
            return {}
        latents, labels = torch.cat(latents), torch.cat(labels)
        return { int(c): latents[labels == c] for c in torch.unique(labels) }

    def _update_snapshot(self, result:TrainResult, selection:ModelSelection, epoch:int, accuracy:float, priors:Dict[int, ClassPrior]):
        current = result.snapshots.get(selection)
        if current is None or accuracy > current.accuracy:
            result.snapshots[selection] = Snapshot(epoch=epoch, accuracy=accuracy,
                                                   state=copy.deepcopy(result.model.state_dict()), priors=dict(priors))

    def _accumulate(self, totals:LossComponents, components:LossComponents) -> LossComponents:
        return LossComponents(**{ name: getattr(totals, name) + getattr(components, name) for name in LossComponents.model_fields })

    def _mean(self, totals:LossComponents, num_steps:int) -> LossComponents:
        if num_steps == 0:
            return totals
        return LossComponents(**{ name: getattr(totals, name) / num_steps for name in LossComponents.model_fields })

    def _reset_record_file(self):
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            (self.run_dir / self.RECORD_FILE).write_text('')

    def _write_epoch(self, epoch_record:EpochRecord):
        if self.run_dir is not None:
            with open(self.run_dir / self.RECORD_FILE, 'a') as f:
                f.write(json.dumps(epoch_record.model_dump(mode='json')) + '\n')

    def _fmt(self, value:Optional[float]) -> str:
        return '-' if value is None else f'{value:.4f}'

    def _setup_logger(self):
        self.logger = setup_logger(__name__)
