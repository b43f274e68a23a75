"""

    models.py

        Simple data models validating data structures across the codebase and with config input and result output
        Tensor-holding runtime types (posteriors, priors, loss breakdowns) are dataclasses in their own modules

"""

from enum import Enum
from typing import Any, List, Dict, Optional

from pydantic import BaseModel, ConfigDict, Field

from .settings import params as SETTINGS

#### VALUE ENUMS ####

class FeatureSet(str, Enum):
    causal_only = 'causal_only'
    both = 'both'

class EnvironmentRole(str, Enum):
    train = 'train'
    test = 'test'

class ObjectiveSelector(str, Enum):
    deepjscc = 'deepjscc' # cross-entropy only
    vib = 'vib' # cross-entropy + beta * KL to N(0,I)
    irm = 'irm' # cross-entropy + lambda * gradient penalty
    vife = 'vife' # vib + lambda * gradient penalty
    vlfe = 'vlfe' # cross-entropy + beta * KL to class priors + triplet
    combined = 'combined' # vlfe + lambda * gradient penalty

    def uses_penalty(self) -> bool:
        return self in (ObjectiveSelector.irm, ObjectiveSelector.vife, ObjectiveSelector.combined)

    def uses_class_priors(self) -> bool:
        return self in (ObjectiveSelector.vlfe, ObjectiveSelector.combined)

class Method(str, Enum):
    """ Methods that can be listed in an experiment config """
    deepjscc = 'deepjscc'
    deepjscc_noshift = 'deepjscc_noshift' # deepjscc trained on the test bias ratio
    vib = 'vib'
    irm = 'irm'
    vife = 'vife'
    vlfe = 'vlfe'
    combined = 'combined'
    oracle = 'oracle' # constant 1 - rho bound, nothing is trained

class Verdict(str, Enum):
    in_distribution = 'in_distribution'
    semantic_shift = 'semantic_shift'

class ModelSelection(str, Enum):
    train_domain = 'train_domain'
    test_domain = 'test_domain'


#### ORACLE MODELS ####

class SemParams(BaseModel):
    """
        Variances of the two-feature linear-Gaussian model
        Range checks are done by SemOracle so they raise ParameterError
    """
    var_causal:float = 1.0 # sigma^2_d1
    var_spurious:float = 1.0 # sigma^2_d2
    var_label:float = 1.0 # sigma^2
    var_channel:float = 0.0 # sigma^2_c
    spurious_gain:float = 2.0 # n_s ~ N(0, gain * sigma^2_d2). 2 reproduces the closed form least-squares weights

class SemSample(BaseModel):
    u_c:float
    u_s:float
    y:float

class RegressionWeights(BaseModel):
    w1:float
    w2:float = 0.0


#### DATA MODELS ####

class EnvironmentSpec(BaseModel):
    bias_ratio:float = Field(ge=0.0, le=1.0) # s: P(color == label)
    label_noise:float = Field(default=0.25, ge=0.0, le=1.0) # rho
    domain_index:int = 0
    role:EnvironmentRole = EnvironmentRole.train


#### CHANNEL AND LOSS MODELS ####

class ChannelConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    p_max:float = Field(default=1.0, gt=0.0)
    noise_var:float = Field(default=0.1, ge=0.0)

class LossWeights(BaseModel):
    model_config = ConfigDict(extra='forbid', populate_by_name=True)

    beta:float = Field(default=1e-3, ge=0.0)
    lambda_:float = Field(default=1e4, ge=0.0, alias='lambda')
    margin:float = Field(default=0.2, ge=0.0) # triplet margin alpha
    noise_samples:int = Field(default=SETTINGS['DEFAULT_NOISE_SAMPLES'], ge=1) # L


#### TRAINING MODELS ####

class TrainConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    epochs:int = Field(default=10, ge=0) # T
    domains:int = Field(default=2, ge=1) # D
    batch_size:int = Field(default=SETTINGS['DEFAULT_BATCH_SIZE'], ge=1) # B, per domain
    latent_dim:int = Field(default=SETTINGS['DEFAULT_LATENT_DIM'], ge=1) # k
    num_classes:int = Field(default=2, ge=2)
    channel:ChannelConfig = ChannelConfig()
    weights:LossWeights = LossWeights()
    objective:ObjectiveSelector = ObjectiveSelector.combined
    learning_rate:float = Field(default=SETTINGS['DEFAULT_LEARNING_RATE'], gt=0.0)
    warmup_fraction:float = Field(default=SETTINGS['LAMBDA_WARMUP_FRACTION'], ge=0.0, le=1.0)
    eval_repeats:int = Field(default=SETTINGS['DEFAULT_EVAL_REPEATS'], ge=1)
    seed:int = 0

class LossComponents(BaseModel):
    total:float = 0.0
    distortion:float = 0.0
    rate:float = 0.0
    penalty:float = 0.0
    triplet:float = 0.0

class EpochRecord(BaseModel):
    epoch:int
    lambda_active:float
    losses:LossComponents
    train_accuracy:float
    val_accuracy:Optional[float] = None
    test_accuracy:Optional[float] = None

class RunRecord(BaseModel):
    epochs:List[EpochRecord] = []
    final_priors:Dict[int, Dict[str, Any]] = {} # class: { mean: [], covariance: [[]], epsilon: x }
    selected_epochs:Dict[ModelSelection, int] = {}
    wall_clock_s:float = 0.0
    config:Dict[str, Any] = {}


#### EXPERIMENT CONFIG ####

class DataConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    root:Optional[str] = None # overridden by SEMCOMM_DATA_ROOT
    id_images:str = 'train-images-idx3-ubyte.gz'
    id_labels:str = 'train-labels-idx1-ubyte.gz'
    id_test_images:Optional[str] = None # if not given, the tail of the id files is held out as test domain
    id_test_labels:Optional[str] = None
    ood_images:Optional[str] = None # Fashion-MNIST style set for semantic-shift detection
    ood_labels:Optional[str] = None
    train_bias:List[float] = Field(default=[0.9, 0.8], min_length=1) # s_tr per training domain
    test_bias:float = Field(default=0.1, ge=0.0, le=1.0) # s_te
    label_noise:float = Field(default=0.25, ge=0.0, le=1.0) # rho
    test_fraction:float = Field(default=1/6, gt=0.0, lt=1.0)
    val_fraction:float = Field(default=0.1, ge=0.0, lt=1.0) # held out of every training domain
    max_samples:Optional[int] = Field(default=None, ge=1) # cap on the id file size (smoke runs)
    max_ood_samples:Optional[int] = Field(default=None, ge=1)

class TrainSection(BaseModel):
    model_config = ConfigDict(extra='forbid')

    epochs:int = Field(default=10, ge=0)
    batch_size:int = Field(default=SETTINGS['DEFAULT_BATCH_SIZE'], ge=1)
    learning_rate:float = Field(default=SETTINGS['DEFAULT_LEARNING_RATE'], gt=0.0)
    latent_dim:int = Field(default=8, ge=1) # 8 dims = 0.83 ms at 9600 Baud
    p_max:float = Field(default=1.0, gt=0.0)
    warmup_fraction:float = Field(default=SETTINGS['LAMBDA_WARMUP_FRACTION'], ge=0.0, le=1.0)
    eval_repeats:int = Field(default=SETTINGS['DEFAULT_EVAL_REPEATS'], ge=1)

class SweepConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    latent_dims:List[int] = Field(default=[2, 4, 8, 16, 32, 64, 96], min_length=1)
    train_psnr:List[float] = Field(default=[10.0], min_length=1)
    test_psnr:List[float] = Field(default=[-5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0], min_length=1)

class AblationConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    method:Method = Method.combined
    betas:List[float] = Field(default=[1e-5, 1e-4, 1e-3, 1e-2], min_length=1)
    lambdas:List[float] = Field(default=[1e3, 1e4, 1e5, 1e6], min_length=1)

class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    name:str = 'experiment'
    seed:int = 0
    output_dir:str = './runs'
    methods:List[Method] = Field(min_length=1)
    data:DataConfig = DataConfig()
    train:TrainSection = TrainSection()
    weights:LossWeights = LossWeights()
    sweep:SweepConfig = SweepConfig()
    ablation:AblationConfig = AblationConfig()
    test_domain_selection:bool = False # leaks test labels into model selection, off by default


#### SWEEP MODELS ####

class SweepKind(str, Enum):
    run = 'run'
    rate_distortion = 'rate_distortion'
    psnr = 'psnr'
    ablation = 'ablation'

class SweepPoint(BaseModel):
    """ One training job of a sweep. Serialized as json for the worker queue """
    kind:SweepKind
    key:str # stable identifier, also the seed derivation key
    method:Method
    latent_dim:int = Field(ge=1)
    train_psnr:float
    test_psnrs:List[float] = Field(min_length=1)
    beta:float = Field(ge=0.0)
    lambda_:float = Field(ge=0.0)
    seed:int
    point_dir:str
    with_detection:bool = True

class PointStatus(str, Enum):
    pending = 'pending'
    done = 'done'
    failed = 'failed'
