"""

    ColoredMnist.py

        IDX ingestion of MNIST-family files and construction of biased two-color environments:

        1. binary label y0 = [digit >= 5]
        2. noisy label y = y0 flipped with probability rho
        3. color bit c = y flipped with probability 1 - s
        4. digit pixels go into channel c, the other channel stays zero

        Semantic-shift sets (Fashion-MNIST) get a uniformly random channel and the out-of-vocabulary label

"""

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import Dataset

from .models import EnvironmentSpec, EnvironmentRole
from .exceptions import IdxFormatError, ParameterError
from .settings import params as SETTINGS
from .utils import setup_logger


#### IDX CONTAINER ####

class IdxCodec:
    """
        IDX files are big-endian:
            [0000] 32 bit magic: 0x00000803 (images, 3 dims) or 0x00000801 (labels, 1 dim)
            [0004] 32 bit size per dimension
            [....] unsigned bytes
    """

    MAGIC_IMAGES = 0x00000803
    MAGIC_LABELS = 0x00000801
    MAGIC_GZIP = b'\x1f\x8b'
    NDIM_BY_MAGIC = { MAGIC_IMAGES: 3, MAGIC_LABELS: 1 }

    @classmethod
    def parse(cls, data:bytes) -> np.ndarray:

        if data[:2] == cls.MAGIC_GZIP:
            data = gzip.decompress(data)

        if len(data) < 4:
            raise IdxFormatError('IdxCodec::parse(): File too short for a magic number', offset=len(data))

        magic = struct.unpack('>I', data[:4])[0]
        ndim = cls.NDIM_BY_MAGIC.get(magic)
        if ndim is None:
            raise IdxFormatError(f'IdxCodec::parse(): Bad magic number 0x{magic:08X}, expected 0x{cls.MAGIC_IMAGES:08X} or 0x{cls.MAGIC_LABELS:08X}', offset=0)

        header_len = 4 + 4 * ndim
        if len(data) < header_len:
            raise IdxFormatError(f'IdxCodec::parse(): Truncated header, {ndim} dimension sizes expected', offset=len(data))

        dims = struct.unpack(f'>{ndim}I', data[4:header_len])
        record_size = int(np.prod(dims[1:])) if ndim > 1 else 1
        expected = header_len + dims[0] * record_size

        if len(data) < expected:
            complete_records = (len(data) - header_len) // record_size if record_size else 0
            raise IdxFormatError(f'IdxCodec::parse(): Truncated payload, header declares {dims[0]} items of {record_size} bytes but only {complete_records} are complete',
                                 offset=header_len + complete_records * record_size)

        return np.frombuffer(data, dtype=np.uint8, count=expected - header_len, offset=header_len).reshape(dims).copy()

    @classmethod
    def serialize(cls, array:np.ndarray) -> bytes:

        array = np.asarray(array)
        magic = { 3: cls.MAGIC_IMAGES, 1: cls.MAGIC_LABELS }.get(array.ndim)
        if magic is None:
            raise ParameterError(f'IdxCodec::serialize(): Only 1 (labels) or 3 (images) dimensional arrays, got {array.ndim}')
        if array.size and (array.min() < 0 or array.max() > 255):
            raise ParameterError('IdxCodec::serialize(): Values must fit in unsigned bytes')

        header = struct.pack(f'>I{array.ndim}I', magic, *array.shape)
        return header + array.astype(np.uint8).tobytes()

    @classmethod
    def read_file(cls, path:str|Path) -> np.ndarray:
        return cls.parse(Path(path).read_bytes())


@dataclass
class RawImageSet:
    images:np.ndarray # n x rows x cols, uint8
    labels:np.ndarray # n, uint8

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ParameterError(f'RawImageSet: {len(self.images)} images but {len(self.labels)} labels')

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index:slice|np.ndarray) -> 'RawImageSet':
        return RawImageSet(images=self.images[index], labels=self.labels[index])

    def to_idx(self) -> Tuple[bytes, bytes]:
        return IdxCodec.serialize(self.images), IdxCodec.serialize(self.labels)

    @classmethod
    def from_idx(cls, images_bytes:bytes, labels_bytes:bytes) -> 'RawImageSet':
        return cls(images=IdxCodec.parse(images_bytes), labels=IdxCodec.parse(labels_bytes))

    @classmethod
    def load(cls, images_path:str|Path, labels_path:str|Path) -> 'RawImageSet':
        return cls(images=IdxCodec.read_file(images_path), labels=IdxCodec.read_file(labels_path))


#### LABELED DATA ####

@dataclass
class LabeledExample:
    x:torch.Tensor # features, 2 x 28 x 28 in [0,1] for colored images
    y:int # class label, OOD_LABEL for semantic-shift data
    d:int # domain index


class LabeledDataset(Dataset):
    """
        Column store of LabeledExamples
        uint8 features are kept as is and scaled to [0,1] on access
        clean_labels holds the label before the label-noise flip (used by the causal oracle)
    """

    def __init__(self, features:torch.Tensor, labels:torch.Tensor, domains:torch.Tensor=None, clean_labels:torch.Tensor=None):
        self.features = features
        self.labels = labels.long()
        self.domains = domains.long() if domains is not None else torch.zeros_like(self.labels)
        self.clean_labels = clean_labels.long() if clean_labels is not None else self.labels.clone()

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i:int) -> LabeledExample:
        return LabeledExample(x=self._scale(self.features[i]), y=int(self.labels[i]), d=int(self.domains[i]))

    @property
    def x(self) -> torch.Tensor:
        return self._scale(self.features)

    @property
    def y(self) -> torch.Tensor:
        return self.labels

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.features.shape[1:])

    def subset(self, index:torch.Tensor|slice) -> 'LabeledDataset':
        return LabeledDataset(self.features[index], self.labels[index], self.domains[index], self.clean_labels[index])

    def classes(self) -> List[int]:
        return sorted(int(c) for c in torch.unique(self.labels))

    @classmethod
    def concat(cls, datasets:Sequence['LabeledDataset']) -> 'LabeledDataset':
        return cls(torch.cat([d.features for d in datasets]),
                   torch.cat([d.labels for d in datasets]),
                   torch.cat([d.domains for d in datasets]),
                   torch.cat([d.clean_labels for d in datasets]))

    def _scale(self, features:torch.Tensor) -> torch.Tensor:
        if features.dtype == torch.uint8:
            return features.float() / 255.0
        return features


#### ENVIRONMENT CONSTRUCTION ####

class ColoredMnist:

    NUM_COLORS = 2 # channel 0 = red, channel 1 = green
    DIGIT_THRESHOLD = 5

    def __init__(self):
        self._setup_logger()

    def build_colored_environment(self, raw:RawImageSet, spec:EnvironmentSpec, seed:int) -> LabeledDataset:

        if len(raw) == 0:
            raise ParameterError('ColoredMnist::build_colored_environment(): Empty raw image set')

        rng = np.random.default_rng(seed)
        n = len(raw)

        clean_labels = (raw.labels >= self.DIGIT_THRESHOLD).astype(np.int64)
        labels = clean_labels ^ (rng.random(n) < spec.label_noise)
        colors = labels ^ (rng.random(n) < 1.0 - spec.bias_ratio)

        self.logger.info(f'ColoredMnist::build_colored_environment(): domain {spec.domain_index} ({spec.role.value}) s={spec.bias_ratio} rho={spec.label_noise}: {n} images')

        return LabeledDataset(features=self._colorize(raw.images, colors),
                              labels=torch.from_numpy(labels.astype(np.int64)),
                              domains=torch.full((n,), spec.domain_index, dtype=torch.long),
                              clean_labels=torch.from_numpy(clean_labels))

    def load_semantic_shift_set(self, raw:RawImageSet, coloring:EnvironmentSpec, seed:int) -> LabeledDataset:

        n = len(raw)
        rng = np.random.default_rng(seed)
        colors = (rng.random(n) < 0.5).astype(np.int64)
        ood_labels = torch.full((n,), SETTINGS['OOD_LABEL'], dtype=torch.long)

        images = raw.images if n else np.zeros((0, 28, 28), dtype=np.uint8)
        return LabeledDataset(features=self._colorize(images, colors),
                              labels=ood_labels,
                              domains=torch.full((n,), coloring.domain_index, dtype=torch.long),
                              clean_labels=ood_labels.clone())

    def build_environments(self, raw:RawImageSet, bias_ratios:Sequence[float], label_noise:float, seed:int,
                           role:EnvironmentRole=EnvironmentRole.train, first_domain:int=0) -> List[LabeledDataset]:
        """ Split raw into len(bias_ratios) interleaved disjoint parts and color each as its own domain """

        environments = []
        for i, bias_ratio in enumerate(bias_ratios):
            spec = EnvironmentSpec(bias_ratio=bias_ratio, label_noise=label_noise, domain_index=first_domain + i, role=role)
            environments.append(self.build_colored_environment(raw.subset(slice(i, None, len(bias_ratios))), spec, seed + i))
        return environments

    #### ITERATION ####

    def batch_iterator(self, data:LabeledDataset, batch_size:int, seed:int) -> Iterator[LabeledDataset]:

        if batch_size < 1:
            raise ParameterError(f'ColoredMnist::batch_iterator(): batch size must be >= 1, got {batch_size}')

        generator = torch.Generator().manual_seed(seed)
        order = torch.randperm(len(data), generator=generator)
        for start in range(0, len(data), batch_size):
            yield data.subset(order[start:start + batch_size])

    def holdout(self, data:LabeledDataset, fraction:float, seed:int) -> Tuple[LabeledDataset, LabeledDataset]:
        """ Seeded split into (kept, held out) """
        generator = torch.Generator().manual_seed(seed)
        order = torch.randperm(len(data), generator=generator)
        num_held = int(round(len(data) * fraction))
        return data.subset(order[num_held:]), data.subset(order[:num_held])

    #### UTILS ####

    def _colorize(self, images:np.ndarray, colors:np.ndarray) -> torch.Tensor:
        n, rows, cols = images.shape
        colored = np.zeros((n, self.NUM_COLORS, rows, cols), dtype=np.uint8)
        colored[np.arange(n), colors] = images
        return torch.from_numpy(colored)

    def _setup_logger(self):
        self.logger = setup_logger(__name__)
