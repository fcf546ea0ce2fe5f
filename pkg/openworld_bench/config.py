"""
Experiment configuration: YAML files validated against a pydantic schema.

Every epsilon is written ``{value: ..., scale: unit|byte}``; byte-scale values are
divided by 255 when the attack or defense config is built. File references are
resolved against the config file's directory, then ``OPENWORLD_DATA_DIR``.
"""

import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import yaml
from dotenv import load_dotenv
from pydantic import (BaseModel, ConfigDict, Field, ValidationError, ValidationInfo, field_validator,
                      model_validator)

from .adv_detectors import MagnetConfig, SqueezerConfig
from .attacks import AttackConfig, PerturbationConstraint
from .models import TrainConfig
from .ood_detectors import OdinConfig
from .robust_training import default_inner_attack
from .transforms import TransformSampler
from .utils import BenchError

# Load environment variables from .env file
load_dotenv()

DEFAULT_SHAPE = (1, 28, 28)


class ConfigError(BenchError):
    """Raised for unreadable or invalid experiment configuration."""
    pass


def data_dir() -> Optional[Path]:
    value = os.getenv('OPENWORLD_DATA_DIR')
    return Path(value) if value else None


def default_output_dir() -> Path:
    return Path(os.getenv('OPENWORLD_OUTPUT_DIR', 'outputs'))


def default_workers() -> int:
    value = os.getenv('OPENWORLD_WORKERS', '4')
    try:
        return max(1, int(value))
    except ValueError:
        raise ConfigError(f"OPENWORLD_WORKERS must be an integer, got '{value}'")


def resolve_path(value: Union[str, Path], base_dir: Optional[Path] = None) -> Path:
    """
    Locate a referenced file or directory.

    Relative paths are tried against ``base_dir`` (the config file's folder) and then
    against ``OPENWORLD_DATA_DIR``.

    Raises:
        ValueError: Nothing exists at any candidate location
    """
    path = Path(value).expanduser()
    if path.is_absolute():
        candidates = [path]
    else:
        candidates = [(base_dir or Path.cwd()) / path]
        if data_dir() is not None:
            candidates.append(data_dir() / path)
    for candidate in candidates:
        if candidate.exists():
            return candidate.resolve()
    raise ValueError(f"File not found: {value} (searched {', '.join(str(c) for c in candidates)})")


def _resolve(value: Optional[Union[str, Path]], info: ValidationInfo) -> Optional[Path]:
    if value is None:
        return None
    context = info.context or {}
    return resolve_path(value, context.get('base_dir'))


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid')


class Epsilon(_Section):
    model_config = ConfigDict(extra='forbid', frozen=True)

    value: float = Field(ge=0)
    scale: Literal['unit', 'byte']

    @property
    def unit_value(self) -> float:
        return self.value / 255.0 if self.scale == 'byte' else self.value

    @property
    def label(self) -> str:
        return f"{self.value:g}/255" if self.scale == 'byte' else f"{self.value:g}"


def _epsilon_list(value: Any) -> Any:
    if isinstance(value, dict):
        return [value]
    return value


class ExperimentSection(_Section):
    name: str = 'experiment'
    seed: int = Field(0, ge=0, lt=2 ** 64)
    output_dir: Optional[Path] = None
    workers: int = Field(default_factory=default_workers, ge=1)
    target_tpr: float = Field(0.95, gt=0, le=1)
    fpr_target: float = Field(0.05, ge=0, lt=1)
    starts: int = Field(100, ge=1)
    calibration_size: int = Field(1000, ge=1)
    ood_holdout: float = Field(0.5, gt=0, lt=1)

    @property
    def output_path(self) -> Path:
        return self.output_dir or default_output_dir() / self.name


class TrainSpec(_Section):
    arch: Literal['linear', 'mlp2', 'cnn_s'] = 'cnn_s'
    options: Dict[str, int] = Field(default_factory=dict)
    epochs: int = Field(5, ge=1)
    batch_size: int = Field(64, ge=1)
    learning_rate: float = Field(1e-3, ge=0)
    optimizer: Literal['sgd', 'sgd-momentum', 'adam'] = 'adam'

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
                           optimizer=self.optimizer, seed=seed)


class ModelSection(_Section):
    name: Optional[str] = None
    checkpoint: Optional[Path] = None
    train: Optional[TrainSpec] = None

    resolve_paths = field_validator('checkpoint', mode='before')(_resolve)

    @model_validator(mode='after')
    def _one_source(self):
        if (self.checkpoint is None) == (self.train is None):
            raise ValueError("model needs exactly one of 'checkpoint' or 'train'")
        return self

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        return self.train.arch if self.train else self.checkpoint.stem


class DataSource(_Section):
    """
    One dataset reference.

    Kinds: ``mnist`` (directory of the four IDX files), ``idx`` (images plus optional
    labels file), ``pgm-folder``, ``manifest``, and the generators ``shapes`` and ``gaussian``.
    """
    name: str
    kind: Literal['mnist', 'idx', 'pgm-folder', 'manifest', 'shapes', 'gaussian']
    path: Optional[Path] = None
    labels: Optional[Path] = None
    split: Literal['train', 'test'] = 'test'
    classes: List[str] = Field(default_factory=list)
    count: int = Field(1000, ge=1)
    shape: Optional[Tuple[int, int, int]] = None
    mean: float = 127.0
    stddev: float = Field(50.0, gt=0)
    limit: Optional[int] = Field(None, ge=1)

    resolve_paths = field_validator('path', 'labels', mode='before')(_resolve)

    @model_validator(mode='after')
    def _kind_fields(self):
        if self.kind in ('mnist', 'idx', 'pgm-folder', 'manifest') and self.path is None:
            raise ValueError(f"data source '{self.name}' of kind {self.kind} needs a 'path'")
        if self.kind == 'shapes' and not self.classes:
            raise ValueError(f"data source '{self.name}' of kind shapes needs 'classes'")
        return self


class InDataSection(DataSource):
    name: str = 'in'
    test_fraction: float = Field(0.2, gt=0, lt=1)
    test: Optional[DataSource] = None

    @model_validator(mode='after')
    def _labelled(self):
        for source in (self, self.test):
            if source is None:
                continue
            if source.kind in ('gaussian', 'pgm-folder'):
                raise ValueError(f"in-distribution data needs labels; kind {source.kind} has none")
            if source.kind == 'idx' and source.labels is None:
                raise ValueError("in-distribution idx data needs a 'labels' file")
        return self


class AttackSpec(_Section):
    name: str
    kind: Literal['pgd', 'bpda', 'magnet-adaptive', 'eot', 'blackbox']
    norm: Literal['linf', 'l2'] = 'linf'
    epsilon: List[Epsilon] = Field(min_length=1)
    loss: Literal['xent', 'cw'] = 'xent'
    kappa: float = Field(0.0, ge=0)
    iterations: int = Field(100, ge=1)
    step_size: Optional[float] = Field(None, gt=0)
    plateau_patience: int = Field(20, ge=1)
    targeting: Literal['rand', 'LL'] = 'rand'
    starts: Optional[int] = Field(None, ge=1)
    sources: Optional[List[str]] = None
    detector: Optional[str] = None
    lambda_recon: List[float] = Field(default_factory=lambda: [0.1, 1.0, 10.0], min_length=1)
    group_size: int = Field(8, ge=1)
    fd_step: float = Field(1e-4, gt=0)
    query_budget: Optional[int] = Field(None, ge=1)
    samples_per_step: int = Field(10, ge=1)
    brightness: float = Field(0.2, ge=0)
    scale_range: Tuple[float, float] = (0.8, 1.2)
    max_rotation_deg: float = Field(15.0, ge=0)
    pixel_shift: float = Field(0.0, ge=0, le=1)

    epsilon_list = field_validator('epsilon', mode='before')(_epsilon_list)

    @model_validator(mode='after')
    def _kind_fields(self):
        if self.kind in ('bpda', 'magnet-adaptive') and not self.detector:
            raise ValueError(f"attack '{self.name}' of kind {self.kind} needs a 'detector'")
        if self.kind == 'bpda' and self.norm != 'l2':
            raise ValueError(f"attack '{self.name}': bpda runs under the l2 norm")
        if self.norm == 'linf' and any(eps.unit_value > 1 for eps in self.epsilon):
            raise ValueError(f"attack '{self.name}': an linf epsilon above 1 leaves the pixel range")
        if any(lam < 0 for lam in self.lambda_recon):
            raise ValueError(f"attack '{self.name}': lambda_recon values must be non-negative")
        return self

    def label(self, eps: Epsilon) -> str:
        return f"{self.name}@{eps.label}"

    def attack_config(self, eps: Epsilon, seed: int) -> AttackConfig:
        return AttackConfig(
            constraint=PerturbationConstraint(self.norm, eps.unit_value),
            loss_kind=self.loss,
            kappa=self.kappa,
            step_size=self.step_size,
            max_iters=self.iterations,
            plateau_patience=self.plateau_patience,
            targeting=self.targeting,
            seed=seed,
        )

    def sampler(self) -> TransformSampler:
        return TransformSampler(self.brightness, self.scale_range, self.max_rotation_deg)


class DetectorSpec(_Section):
    name: str
    kind: Literal['baseline', 'odin', 'feature-squeezing', 'magnet']
    temperature: float = Field(1000.0, ge=1)
    preprocess_epsilon: float = Field(0.0014, ge=0)
    tune: bool = False
    tune_source: Optional[str] = None
    bit_depth: int = Field(1, ge=1, le=8)
    median_kernel: int = Field(3, ge=1)
    squeezers: List[Literal['bit-depth', 'median', 'smoothing']] = Field(
        default_factory=lambda: ['bit-depth', 'median'], min_length=1)
    recon_norm: Literal['l1', 'l2'] = 'l1'
    noise_level: float = Field(0.1, ge=0)
    autoencoder: Optional[Path] = None
    train: TrainSpec = Field(default_factory=lambda: TrainSpec(epochs=3))
    target_tpr: Optional[float] = Field(None, gt=0, le=1)
    fpr_target: Optional[float] = Field(None, ge=0, lt=1)

    resolve_paths = field_validator('autoencoder', mode='before')(_resolve)

    @field_validator('median_kernel')
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError(f"median_kernel must be odd, got {value}")
        return value

    @property
    def polarity(self) -> str:
        return 'ood' if self.kind in ('baseline', 'odin') else 'adversarial'

    def odin_config(self) -> OdinConfig:
        return OdinConfig(self.temperature, self.preprocess_epsilon)

    def squeezer_config(self) -> SqueezerConfig:
        return SqueezerConfig(bit_depth=self.bit_depth, median_kernel=self.median_kernel,
                              enabled=tuple(self.squeezers))

    def magnet_config(self, fpr_target: float) -> MagnetConfig:
        return MagnetConfig(self.recon_norm, fpr_target, self.noise_level)


class DefenseSpec(_Section):
    name: str
    kind: Literal['adversarial', 'alp', 'background', 'confidence-calibrated']
    norm: Literal['linf', 'l2'] = 'linf'
    epsilon: Epsilon = Field(default_factory=lambda: Epsilon(value=0.3, scale='unit'))
    inner_steps: int = Field(10, ge=1)
    alpha: float = Field(0.5, ge=0, le=1)
    alp_weight: float = Field(0.5, ge=0)
    sources: List[str] = Field(default_factory=list)
    samples_per_source: int = Field(5000, ge=1)
    one_class_per_source: bool = True
    mix_alpha: float = Field(0.5, ge=0, le=1)
    beta: float = Field(1.0, ge=0)
    train: Optional[TrainSpec] = None
    checkpoint: Optional[Path] = None

    resolve_paths = field_validator('checkpoint', mode='before')(_resolve)

    @model_validator(mode='after')
    def _kind_fields(self):
        if self.kind == 'confidence-calibrated' and not self.sources:
            raise ValueError(f"defense '{self.name}' needs at least one OOD proxy in 'sources'")
        if self.norm == 'linf' and self.epsilon.unit_value > 1:
            raise ValueError(f"defense '{self.name}': an linf epsilon above 1 leaves the pixel range")
        return self

    def inner_attack(self) -> AttackConfig:
        return default_inner_attack(PerturbationConstraint(self.norm, self.epsilon.unit_value), self.inner_steps)


class ExperimentConfig(_Section):
    experiment: ExperimentSection = Field(default_factory=ExperimentSection)
    model: ModelSection
    in_data: InDataSection
    ood_data: List[DataSource] = Field(default_factory=list)
    attacks: List[AttackSpec] = Field(default_factory=list)
    detectors: List[DetectorSpec] = Field(default_factory=list)
    defenses: List[DefenseSpec] = Field(default_factory=list)

    @model_validator(mode='after')
    def _references(self):
        for what, items in (('ood_data', self.ood_data), ('attacks', self.attacks),
                            ('detectors', self.detectors), ('defenses', self.defenses)):
            names = [item.name for item in items]
            duplicates = sorted({n for n in names if names.count(n) > 1})
            if duplicates:
                raise ValueError(f"duplicate names in {what}: {duplicates}")
        sources = {self.in_data.name} | {s.name for s in self.ood_data}
        if len(sources) != 1 + len(self.ood_data):
            raise ValueError(f"OOD source names must differ from the in-distribution name '{self.in_data.name}'")
        ood_names = {s.name for s in self.ood_data}
        detectors = {d.name: d for d in self.detectors}
        for attack in self.attacks:
            for source in attack.sources or []:
                if source not in sources:
                    raise ValueError(f"attack '{attack.name}' references unknown data source '{source}'")
            if attack.detector:
                detector = detectors.get(attack.detector)
                wanted = 'feature-squeezing' if attack.kind == 'bpda' else 'magnet'
                if detector is None or detector.kind != wanted:
                    raise ValueError(f"attack '{attack.name}' needs a {wanted} detector, "
                                     f"got '{attack.detector}'")
        for defense in self.defenses:
            for source in defense.sources:
                if source not in ood_names:
                    raise ValueError(f"defense '{defense.name}' references unknown OOD source '{source}'")
        for detector in self.detectors:
            if detector.tune_source and detector.tune_source not in ood_names:
                raise ValueError(f"detector '{detector.name}' tunes on unknown OOD source '{detector.tune_source}'")
        return self


def _format_errors(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        where = '.'.join(str(part) for part in item['loc']) or '<root>'
        lines.append(f"  {where}: {item['msg']}")
    return "Invalid configuration:\n" + '\n'.join(lines)


def config_from_dict(data: Dict[str, Any], base_dir: Optional[Path] = None) -> ExperimentConfig:
    """
    Validate a parsed configuration mapping.

    Raises:
        ConfigError: On any schema violation, with one line per offending field
    """
    if not isinstance(data, dict):
        raise ConfigError("Configuration must be a mapping of sections")
    try:
        return ExperimentConfig.model_validate(data, context={'base_dir': base_dir})
    except ValidationError as e:
        raise ConfigError(_format_errors(e)) from e


def load_config(path: Union[str, Path], seed: Optional[int] = None,
                output_dir: Optional[Union[str, Path]] = None) -> ExperimentConfig:
    """
    Read and validate an experiment file; ``seed`` and ``output_dir`` override the file.

    Examples:
        >>> cfg = load_config('configs/toy.yaml', seed=7)
        >>> cfg.experiment.seed
        7
    """
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding='utf-8'))
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"Malformed YAML in {path}: {e}") from e
    data = data or {}
    if isinstance(data, dict) and (seed is not None or output_dir is not None):
        section = dict(data.get('experiment') or {})
        if seed is not None:
            section['seed'] = seed
        if output_dir is not None:
            section['output_dir'] = str(output_dir)
        data = {**data, 'experiment': section}
    return config_from_dict(data, base_dir=path.parent.resolve())


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode='json'), sort_keys=False)
