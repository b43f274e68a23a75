"""

    ExperimentRunner.py

        Reproducible experiments from a YAML config:

        run             methods x train PSNR at the configured latent dim, tested across the test PSNR grid (+ detection)
        rate_distortion methods x latent dims at the first train PSNR, tested at that PSNR
        psnr            methods x train PSNR, tested across the test PSNR grid (+ detection)
        ablation        one method over beta x lambda, tested across the test PSNR grid

        Every sweep point is a Celery task ('semcomm.train_point') with its own seed derived from (master seed, point key)
        A run directory is self-describing:

        <output_dir>/<name>-<config hash>/
            config.yaml            config snapshot
            manifest.json          config hash, seed, code version, per-point seeds and status, csv schemas
            metrics.csv | rate_distortion.csv | psnr.csv | ablation.csv
            points/<sweep>/<point hash>/record.jsonl, run_record.json, checkpoint*.pt
            FAILED                 only after a runtime failure, next to the partial results

"""

import os
import json
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
import yaml
from pydantic import ValidationError

from .AwgnChannel import AwgnChannel
from .ColoredMnist import ColoredMnist, RawImageSet, LabeledDataset, IdxCodec
from .TaskModel import TaskModel
from .Trainer import Trainer, TrainResult
from .Detector import Detector, DetectorState
from .models import (ExperimentConfig, TrainConfig, ChannelConfig, EnvironmentSpec, EnvironmentRole, Method, ObjectiveSelector,
                     ModelSelection, SweepKind, SweepPoint, PointStatus)
from .exceptions import ConfigError, ParameterError, SemCommError
from .settings import params as SETTINGS
from .utils import CONFIG, setup_logger, short_hash, derive_seed, code_version_hash, atomic_write_text
from . import celery_tasks


@dataclass
class DataBundle:
    train_envs:List[LabeledDataset]
    val_envs:List[LabeledDataset]
    test_env:LabeledDataset
    ood_set:Optional[LabeledDataset] = None
    noshift_envs:Optional[List[LabeledDataset]] = None # training domains colored with the test bias ratio
    noshift_val_envs:Optional[List[LabeledDataset]] = None


class ExperimentRunner:

    MANIFEST_FILE = 'manifest.json'
    CONFIG_SNAPSHOT_FILE = 'config.yaml'
    FAILED_MARKER = 'FAILED'
    DATA_ROOT_VAR = 'SEMCOMM_DATA_ROOT'

    CSV_FILES = {
        SweepKind.run: 'metrics.csv',
        SweepKind.rate_distortion: 'rate_distortion.csv',
        SweepKind.psnr: 'psnr.csv',
        SweepKind.ablation: 'ablation.csv',
    }
    CSV_COLUMNS = {
        SweepKind.run: ['method', 'selection', 'latent_dim', 'latency_ms', 'train_psnr', 'test_psnr', 'test_accuracy', 'auroc'],
        SweepKind.rate_distortion: ['method', 'selection', 'latent_dim', 'latency_ms', 'test_accuracy'],
        SweepKind.psnr: ['method', 'selection', 'train_psnr', 'test_psnr', 'test_accuracy', 'auroc'],
        SweepKind.ablation: ['method', 'selection', 'beta', 'lambda', 'train_psnr', 'test_psnr', 'test_accuracy'],
    }

    METHOD_OBJECTIVES = {
        Method.deepjscc: ObjectiveSelector.deepjscc,
        Method.deepjscc_noshift: ObjectiveSelector.deepjscc,
        Method.vib: ObjectiveSelector.vib,
        Method.irm: ObjectiveSelector.irm,
        Method.vife: ObjectiveSelector.vife,
        Method.vlfe: ObjectiveSelector.vlfe,
        Method.combined: ObjectiveSelector.combined,
        Method.oracle: None, # nothing to train
    }

    config:ExperimentConfig = None
    config_json:str = None
    config_hash:str = None
    run_dir:Path = None

    def __init__(self, config:ExperimentConfig, run_dir:str|Path=None):
        self._setup_logger()
        self.config = config
        self.config_json = config.model_dump_json(by_alias=True)
        self.config_hash = short_hash(self.config_json)
        self.run_dir = Path(run_dir) if run_dir is not None else Path(config.output_dir) / f'{config.name}-{self.config_hash}'
        self.builder = ColoredMnist()
        self._data:DataBundle = None

    @classmethod
    def from_file(cls, path:str|Path, run_dir:str|Path=None) -> 'ExperimentRunner':
        return cls(cls.load_config(path), run_dir=run_dir)

    #### CONFIG ####

    @classmethod
    def load_config(cls, path:str|Path, check_files:bool=True) -> ExperimentConfig:
        """ Parse and validate a YAML experiment config. Every problem raises ConfigError with field-level messages """
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f'Config file "{path}" not found')
        except yaml.YAMLError as e:
            raise ConfigError(f'Config file "{path}" is not valid YAML: {e}')

        if not isinstance(raw, dict):
            raise ConfigError(f'Config file "{path}" should contain a mapping of sections', ['<root>: expected a mapping'])

        try:
            config = ExperimentConfig.model_validate(raw)
        except ValidationError as e:
            field_errors = [f"{'.'.join(str(l) for l in err['loc'])}: {err['msg']}" for err in e.errors()]
            raise ConfigError(f'Invalid experiment config "{path}"', field_errors) from e

        if check_files:
            missing = cls.missing_data_files(config)
            if missing:
                raise ConfigError(f'Invalid experiment config "{path}": data files not found', missing)

        return config

    @classmethod
    def data_root_for(cls, config:ExperimentConfig) -> Path:
        """ Environment variable > .env > config > working directory """
        root = os.environ.get(cls.DATA_ROOT_VAR) or CONFIG.get(cls.DATA_ROOT_VAR) or config.data.root or '.'
        return Path(root)

    @classmethod
    def missing_data_files(cls, config:ExperimentConfig) -> List[str]:
        root = cls.data_root_for(config)
        missing = []
        for field_name in ('id_images', 'id_labels', 'id_test_images', 'id_test_labels', 'ood_images', 'ood_labels'):
            filename = getattr(config.data, field_name)
            if filename is not None and not (root / filename).is_file():
                missing.append(f'data.{field_name}: file not found: {root / filename}')
        return missing

    #### DATA ####

    def data(self) -> DataBundle:
        if self._data is None:
            self._data = self._load_data()
        return self._data

    def _load_data(self) -> DataBundle:

        cfg = self.config.data
        root = self.data_root_for(self.config)
        seed = derive_seed(self.config.seed, 'data')

        raw = RawImageSet.load(root / cfg.id_images, root / cfg.id_labels)
        if cfg.max_samples is not None:
            raw = raw.subset(slice(0, cfg.max_samples))

        if cfg.id_test_images is not None and cfg.id_test_labels is not None:
            raw_test = RawImageSet.load(root / cfg.id_test_images, root / cfg.id_test_labels)
            if cfg.max_samples is not None:
                raw_test = raw_test.subset(slice(0, max(1, int(round(cfg.max_samples * cfg.test_fraction)))))
        else:
            num_test = max(1, int(round(len(raw) * cfg.test_fraction)))
            raw_test = raw.subset(slice(len(raw) - num_test, None))
            raw = raw.subset(slice(0, len(raw) - num_test))

        train_envs, val_envs = self._split_validation(
            self.builder.build_environments(raw, cfg.train_bias, cfg.label_noise, seed, EnvironmentRole.train), seed)

        num_train = len(cfg.train_bias)
        test_spec = EnvironmentSpec(bias_ratio=cfg.test_bias, label_noise=cfg.label_noise, domain_index=num_train, role=EnvironmentRole.test)
        test_env = self.builder.build_colored_environment(raw_test, test_spec, seed + num_train)

        bundle = DataBundle(train_envs=train_envs, val_envs=val_envs, test_env=test_env)

        if Method.deepjscc_noshift in self.config.methods:
            bundle.noshift_envs, bundle.noshift_val_envs = self._split_validation(
                self.builder.build_environments(raw, [cfg.test_bias] * num_train, cfg.label_noise, seed, EnvironmentRole.train), seed)

        if cfg.ood_images is not None:
            images = IdxCodec.read_file(root / cfg.ood_images)
            labels = IdxCodec.read_file(root / cfg.ood_labels) if cfg.ood_labels is not None else np.zeros(len(images), dtype=np.uint8)
            raw_ood = RawImageSet(images=images, labels=labels)
            if cfg.max_ood_samples is not None:
                raw_ood = raw_ood.subset(slice(0, cfg.max_ood_samples))
            ood_spec = EnvironmentSpec(bias_ratio=0.5, label_noise=0.0, domain_index=num_train + 1, role=EnvironmentRole.test)
            bundle.ood_set = self.builder.load_semantic_shift_set(raw_ood, ood_spec, seed + num_train + 1)

        self.logger.info(f'ExperimentRunner::_load_data(): train {[len(e) for e in train_envs]} val {[len(e) for e in val_envs]} '
                         f'test {len(test_env)} ood {len(bundle.ood_set) if bundle.ood_set is not None else "-"} (root "{root}")')
        return bundle

    def _split_validation(self, envs:List[LabeledDataset], seed:int) -> tuple:
        train_envs, val_envs = [], []
        for d, env in enumerate(envs):
            kept, held = self.builder.holdout(env, self.config.data.val_fraction, seed + 100 + d)
            train_envs.append(kept)
            val_envs.append(held)
        return train_envs, val_envs

    #### SWEEPS ####

    def run(self) -> Path:
        self._sweep(SweepKind.run)
        return self.run_dir

    def sweep_rate_distortion(self) -> Path:
        return self._sweep(SweepKind.rate_distortion)

    def sweep_psnr(self) -> Path:
        return self._sweep(SweepKind.psnr)

    def sweep_ablation(self) -> Path:
        return self._sweep(SweepKind.ablation)

    def points(self, kind:SweepKind) -> List[SweepPoint]:

        cfg = self.config
        kind = SweepKind(kind)
        beta, lambda_ = cfg.weights.beta, cfg.weights.lambda_
        first_psnr = cfg.sweep.train_psnr[0]

        if kind in (SweepKind.run, SweepKind.psnr):
            combos = [(m, cfg.train.latent_dim, tr, beta, lambda_) for m in cfg.methods for tr in cfg.sweep.train_psnr]
            test_psnrs, with_detection = cfg.sweep.test_psnr, True
        elif kind == SweepKind.rate_distortion:
            combos = [(m, k, first_psnr, beta, lambda_) for m in cfg.methods for k in cfg.sweep.latent_dims]
            test_psnrs, with_detection = [first_psnr], False
        else:
            combos = [(cfg.ablation.method, cfg.train.latent_dim, first_psnr, b, l) for b in cfg.ablation.betas for l in cfg.ablation.lambdas]
            test_psnrs, with_detection = cfg.sweep.test_psnr, False

        points = []
        for method, latent_dim, train_psnr, b, l in combos:
            key = f'{kind.value}/{method.value}/k={latent_dim}/train_psnr={train_psnr:g}/beta={b:g}/lambda={l:g}'
            points.append(SweepPoint(kind=kind, key=key, method=method, latent_dim=latent_dim, train_psnr=train_psnr,
                                     test_psnrs=test_psnrs, beta=b, lambda_=l, seed=derive_seed(cfg.seed, key),
                                     point_dir=str(self.run_dir / 'points' / kind.value / short_hash(key)),
                                     with_detection=with_detection))
        return points

    def _sweep(self, kind:SweepKind) -> Path:

        kind = SweepKind(kind)
        points = self.points(kind)
        csv_path = self.run_dir / self.CSV_FILES[kind]

        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / self.FAILED_MARKER).unlink(missing_ok=True)
        atomic_write_text(self.run_dir / self.CONFIG_SNAPSHOT_FILE, yaml.safe_dump(json.loads(self.config_json), sort_keys=False))

        manifest = self._read_manifest()
        manifest['sweeps'][kind.value] = {
            'csv': self.CSV_FILES[kind],
            'columns': self.CSV_COLUMNS[kind],
            'status': 'running',
            'points': { p.key: { 'seed': p.seed, 'dir': str(Path(p.point_dir).relative_to(self.run_dir)), 'status': PointStatus.pending.value } for p in points },
        }
        self._write_manifest(manifest)

        self.logger.info(f'**** ExperimentRunner::_sweep(): "{kind.value}" with {len(points)} points into "{self.run_dir}" ****')

        celery_tasks.register_runner(self.config_json, self)
        rows = []
        try:
            tasks = [celery_tasks.train_point.apply_async(args=[self.config_json, p.model_dump_json()]) for p in points]
            for point, task in zip(points, tasks):
                rows.extend(json.loads(task.get()))
                manifest['sweeps'][kind.value]['points'][point.key]['status'] = PointStatus.done.value
                self._write_manifest(manifest)

        except Exception as e:
            failed = [k for k, p in manifest['sweeps'][kind.value]['points'].items() if p['status'] != PointStatus.done.value]
            for key in failed:
                manifest['sweeps'][kind.value]['points'][key]['status'] = PointStatus.failed.value
            manifest['sweeps'][kind.value]['status'] = 'failed'
            self._write_manifest(manifest)
            self._write_csv(kind, rows, csv_path)
            atomic_write_text(self.run_dir / self.FAILED_MARKER, f'sweep: {kind.value}\nerror: {e}\n\n{traceback.format_exc()}')
            self.logger.error(f'ExperimentRunner::_sweep(): "{kind.value}" failed after {len(rows)} rows: {e}')
            raise

        self._write_csv(kind, rows, csv_path)
        manifest['sweeps'][kind.value]['status'] = 'done'
        self._write_manifest(manifest)

        self.logger.info(f'**** ExperimentRunner::_sweep(): "{kind.value}" done: {len(rows)} rows in "{csv_path}" ****')
        return csv_path

    #### SWEEP POINTS ####

    def execute_point(self, point:SweepPoint) -> List[Dict[str, Any]]:
        """ Train one point, write its checkpoints and return its metric rows (one per selection x test PSNR) """

        self.logger.info(f'==== ExperimentRunner::execute_point(): "{point.key}" (seed {point.seed}) ====')
        if point.method == Method.oracle:
            return self._oracle_rows(point)

        data = self.data()
        if point.method == Method.deepjscc_noshift:
            train_envs, val_envs = data.noshift_envs, data.noshift_val_envs
        else:
            train_envs, val_envs = data.train_envs, data.val_envs

        train_config = self.train_config(point, num_domains=len(train_envs))
        trainer = Trainer(run_dir=point.point_dir)
        result = trainer.train(train_config, train_envs, val_envs=[e for e in val_envs if len(e)] or None, test_env=data.test_env)

        detectors = {}
        if point.with_detection:
            calibration = LabeledDataset.concat(val_envs) if sum(len(e) for e in val_envs) else LabeledDataset.concat(train_envs)
            for selection in result.snapshots:
                detectors[selection] = self.calibrate_detector(trainer, result, selection, calibration, AwgnChannel(train_config.channel), point.seed)

        primary = ModelSelection.test_domain if self.config.test_domain_selection else ModelSelection.train_domain
        trainer.save_checkpoints(result, point.point_dir, primary=primary,
                                 config={ 'train': result.record.config, 'method': point.method.value, 'key': point.key },
                                 detectors={ s: d.to_dict() for s, d in detectors.items() })
        atomic_write_text(Path(point.point_dir) / 'run_record.json', result.record.model_dump_json(indent=2))

        rows = []
        for selection in sorted(result.snapshots, key=lambda s: s.value != primary.value):
            model, _ = result.selected(selection)
            for test_psnr in point.test_psnrs:
                channel = AwgnChannel.from_psnr(test_psnr, self.config.train.p_max)
                accuracy = trainer.evaluate_accuracy(model, data.test_env, channel, self.config.train.eval_repeats, seed=derive_seed(point.seed, f'test:{test_psnr:g}'))
                auroc = None
                if selection in detectors and data.ood_set is not None and len(data.ood_set):
                    auroc = self.detection_auroc(trainer, model, detectors[selection], data.test_env, data.ood_set, channel, derive_seed(point.seed, f'detect:{test_psnr:g}'))
                rows.append(self._row(point, selection, test_psnr, accuracy, auroc))

        return rows

    def train_config(self, point:SweepPoint, num_domains:int) -> TrainConfig:
        train = self.config.train
        return TrainConfig(epochs=train.epochs, domains=num_domains, batch_size=train.batch_size, latent_dim=point.latent_dim,
                           num_classes=2,
                           channel=ChannelConfig(p_max=train.p_max, noise_var=AwgnChannel.noise_var_for_psnr(train.p_max, point.train_psnr)),
                           weights=self.config.weights.model_copy(update={ 'beta': point.beta, 'lambda_': point.lambda_ }),
                           objective=self.METHOD_OBJECTIVES[point.method],
                           learning_rate=train.learning_rate, warmup_fraction=train.warmup_fraction,
                           eval_repeats=train.eval_repeats, seed=point.seed)

    def calibrate_detector(self, trainer:Trainer, result:TrainResult, selection:ModelSelection, calibration:LabeledDataset,
                           channel:AwgnChannel, seed:int) -> DetectorState:
        """ Priors of the selected epoch, threshold at the target TPR on held-out in-distribution latents """
        model, priors = result.selected(selection)
        detector = Detector(DetectorState(priors=priors))
        scores = detector.ood_score(trainer.received_latents(model, calibration, channel, derive_seed(seed, 'calibrate')))
        detector.calibrate(scores.tolist(), SETTINGS['DETECTOR_TARGET_TPR'])
        return detector.state

    def detection_auroc(self, trainer:Trainer, model, state:DetectorState, id_set:LabeledDataset, ood_set:LabeledDataset,
                        channel:AwgnChannel, seed:int) -> float:
        detector = Detector(state)
        id_scores = detector.ood_score(trainer.received_latents(model, id_set, channel, derive_seed(seed, 'id')))
        ood_scores = detector.ood_score(trainer.received_latents(model, ood_set, channel, derive_seed(seed, 'ood')))
        return Detector.auroc(id_scores.tolist(), ood_scores.tolist())

    def _oracle_rows(self, point:SweepPoint) -> List[Dict[str, Any]]:
        bound = 1.0 - self.config.data.label_noise
        return [self._row(point, selection, test_psnr, bound, None) for selection in (ModelSelection.train_domain, ModelSelection.test_domain)
                for test_psnr in point.test_psnrs]

    def _row(self, point:SweepPoint, selection:ModelSelection, test_psnr:float, accuracy:float, auroc:Optional[float]) -> Dict[str, Any]:
        return {
            'method': point.method.value,
            'selection': selection.value,
            'latent_dim': point.latent_dim,
            'latency_ms': AwgnChannel.latency_ms(point.latent_dim),
            'beta': point.beta,
            'lambda': point.lambda_,
            'train_psnr': point.train_psnr,
            'test_psnr': test_psnr,
            'test_accuracy': accuracy,
            'auroc': auroc,
        }

    #### DETECTION ON NEW DATA ####

    @classmethod
    def detect(cls, run_dir:str|Path, ood_images:str|Path, method:str=None, seed:int=0) -> Path:
        """ Score an IDX image file with the first stored detector in run_dir, write sample_id, score, verdict """

        run_dir = Path(run_dir)
        logger = setup_logger(__name__)
        if not run_dir.is_dir():
            raise ParameterError(f'ExperimentRunner::detect(): Run directory "{run_dir}" does not exist')

        model, archive = None, None
        for path in sorted(run_dir.rglob('checkpoint.pt')):
            candidate, candidate_archive = TaskModel.load_checkpoint(path)
            if candidate_archive.get('detector') and (method is None or candidate_archive['config'].get('method') == method):
                model, archive = candidate, candidate_archive
                logger.info(f'ExperimentRunner::detect(): Using "{path}"')
                break
        if model is None:
            raise SemCommError(f'ExperimentRunner::detect(): No checkpoint with a detector state in "{run_dir}"' + (f' for method "{method}"' if method else ''))

        images = IdxCodec.read_file(ood_images)
        if images.ndim != 3:
            raise ParameterError(f'ExperimentRunner::detect(): "{ood_images}" is not an IDX image file')

        train_config = TrainConfig.model_validate(archive['config']['train'])
        raw = RawImageSet(images=images, labels=np.zeros(len(images), dtype=np.uint8))
        data = ColoredMnist().load_semantic_shift_set(raw, EnvironmentSpec(bias_ratio=0.5, role=EnvironmentRole.test), seed)

        detector = Detector(DetectorState.from_dict(archive['detector']))
        latents = Trainer().received_latents(model, data, AwgnChannel(train_config.channel), seed)
        scores = detector.ood_score(latents) if len(data) else []

        out_path = run_dir / f'detect_{Path(ood_images).name.split(".")[0]}.csv'
        df = detector.export_scores(out_path, list(scores))
        num_shifted = int((df['verdict'] == 'semantic_shift').sum())
        logger.info(f'ExperimentRunner::detect(): {num_shifted}/{len(df)} samples flagged as semantic shift, written to "{out_path}"')
        return out_path

    #### FILES ####

    def _write_csv(self, kind:SweepKind, rows:List[Dict[str, Any]], path:Path):
        df = pd.DataFrame(rows, columns=self.CSV_COLUMNS[kind])
        atomic_write_text(path, df.to_csv(index=False, float_format=SETTINGS['CSV_FLOAT_FORMAT']))

    def _read_manifest(self) -> Dict[str, Any]:
        path = self.run_dir / self.MANIFEST_FILE
        if path.is_file():
            manifest = json.loads(path.read_text())
            if manifest.get('config_hash') == self.config_hash:
                return manifest
            self.logger.warning(f'ExperimentRunner::_read_manifest(): Manifest in "{self.run_dir}" belongs to another config, replaced')
        return {
            'schema_version': SETTINGS['CSV_SCHEMA_VERSION'],
            'name': self.config.name,
            'config_hash': self.config_hash,
            'seed': self.config.seed,
            'code_version': code_version_hash(),
            'config': json.loads(self.config_json),
            'sweeps': {},
        }

    def _write_manifest(self, manifest:Dict[str, Any]):
        atomic_write_text(self.run_dir / self.MANIFEST_FILE, json.dumps(manifest, indent=2))

    def _setup_logger(self):
        self.logger = setup_logger(__name__)
