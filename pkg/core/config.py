"""
Configuração de treino e de experiência.

Os valores por defeito vêm de `settings.ISPLIT`; a validação do ficheiro
JSON é feita pelos formulários em `core.forms`.
"""
import copy
from dataclasses import asdict, dataclass, field

from django.conf import settings

PHASES = ('classifier', 'ae', 'finetune')
OPTIMIZERS = ('adam', 'sgd')
LOSSES = ('mse_recon', 'cross_entropy', 'mse_onehot')
REDUCTIONS = ('sum', 'mean')
CANDIDATE_MODES = ('auto-cui', 'auto-cde', 'explicit')


@dataclass(frozen=True)
class TrainConfig:
    """Hiper-parâmetros de uma fase de treino."""
    phase: str = 'classifier'
    epochs: int = 30
    lr: float = 5e-3
    optimizer: str = 'adam'
    batch_size: int = 32
    loss: str = 'cross_entropy'
    seed: int = 0

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})

    @classmethod
    def default(cls, phase: str) -> "TrainConfig":
        return cls(**settings.ISPLIT['TRAINING'][phase])


@dataclass(frozen=True)
class DatasetConfig:
    source: str = 'synth'
    class_count: int = 8
    per_class: int = 100
    image_size: int = 32
    profile: str = 'mixed'
    images: str = ''
    labels: str = ''
    splits: tuple = (0.7, 0.15, 0.15)


@dataclass(frozen=True)
class ExperimentConfig:
    """Configuração completa de uma execução do pipeline."""
    name: str
    architecture: str
    seed: int
    dataset: DatasetConfig
    reduction: str
    class_balanced: bool
    class_subsets: dict
    candidates: str
    explicit_layers: tuple
    max_candidates: int
    rate: float
    training: dict
    resample_trials: int
    resample_size: int
    bandwidth_bytes_per_s: float
    latency_s: float
    output_dir: str
    extra: dict = field(default_factory=dict)

    def train_config(self, phase: str) -> TrainConfig:
        return self.training[phase]

    def to_dict(self) -> dict:
        """Forma JSON aninhada (a mesma aceite por `load_experiment_config`)."""
        return {
            'name': self.name,
            'architecture': self.architecture,
            'seed': self.seed,
            'dataset': {**asdict(self.dataset), 'splits': list(self.dataset.splits)},
            'cui': {
                'reduction': self.reduction,
                'class_balanced': self.class_balanced,
                'class_subsets': {k: list(v) for k, v in self.class_subsets.items()},
            },
            'split': {
                'candidates': list(self.explicit_layers) if self.candidates == 'explicit' else self.candidates,
                'max_candidates': self.max_candidates,
                'rate': self.rate,
            },
            'training': {phase: asdict(cfg) for phase, cfg in self.training.items()},
            'stats': {'trials': self.resample_trials, 'sample_size': self.resample_size},
            'channel': {'bandwidth_bytes_per_s': self.bandwidth_bytes_per_s, 'latency_s': self.latency_s},
            'output_dir': self.output_dir,
        }


def default_config() -> dict:
    """Configuração por defeito (JSON aninhado) a partir de `settings.ISPLIT`."""
    isplit = settings.ISPLIT
    return {
        'name': 'default',
        'architecture': 'vgg-micro',
        'seed': 0,
        'dataset': {
            'source': 'synth', 'class_count': 8, 'per_class': 100, 'image_size': 32,
            'profile': 'mixed', 'images': '', 'labels': '', 'splits': [0.7, 0.15, 0.15],
        },
        'cui': {'reduction': 'sum', 'class_balanced': False, 'class_subsets': {}},
        'split': {'candidates': 'auto-cui', 'max_candidates': 5, 'rate': 0.9},
        'training': copy.deepcopy(isplit['TRAINING']),
        'stats': {'trials': isplit['RESAMPLE_TRIALS'], 'sample_size': isplit['RESAMPLE_SIZE']},
        'channel': dict(isplit['CHANNEL']),
        'output_dir': str(isplit['OUTPUT_ROOT'] / 'default'),
    }
