import json
import logging
from pathlib import Path

from django import forms

from .config import (
    CANDIDATE_MODES,
    LOSSES,
    OPTIMIZERS,
    PHASES,
    REDUCTIONS,
    DatasetConfig,
    ExperimentConfig,
    TrainConfig,
    default_config,
)
from .datasets import STRUCTURE_PROFILES
from .exceptions import ConfigError

logger = logging.getLogger(__name__)


def _choices(values):
    return [(value, value) for value in values]


class TrainConfigForm(forms.Form):
    """
    Valida a configuração de uma fase de treino.

    `epochs` aceita 0 (nenhuma atualização) e `lr` aceita 0 (parâmetros
    inalterados); ambos servem para verificações de sanidade.
    """
    phase = forms.ChoiceField(choices=_choices(PHASES))
    epochs = forms.IntegerField(min_value=0)
    lr = forms.FloatField(min_value=0.0)
    optimizer = forms.ChoiceField(choices=_choices(OPTIMIZERS))
    batch_size = forms.IntegerField(min_value=1)
    loss = forms.ChoiceField(choices=_choices(LOSSES))
    seed = forms.IntegerField(min_value=0)

    def clean(self):
        cleaned = super().clean()
        phase, loss = cleaned.get('phase'), cleaned.get('loss')
        # A fase 'ae' reconstrói mapas de ativação; as outras classificam
        if phase == 'ae' and loss and loss != 'mse_recon':
            self.add_error('loss', "A fase 'ae' só aceita 'mse_recon'.")
        if phase in ('classifier', 'finetune') and loss == 'mse_recon':
            self.add_error('loss', f"A fase '{phase}' precisa de uma perda de classificação.")
        return cleaned

    def to_config(self) -> TrainConfig:
        return TrainConfig(**self.cleaned_data)


class ExperimentConfigForm(forms.Form):
    """
    Valida o ficheiro JSON da experiência (já achatado em `section_field`).

    As secções de treino são validadas à parte por `TrainConfigForm`.
    """
    name = forms.CharField(max_length=100)
    architecture = forms.CharField()
    seed = forms.IntegerField(min_value=0)

    dataset_source = forms.ChoiceField(choices=_choices(('synth', 'idx')))
    dataset_class_count = forms.IntegerField(min_value=2)
    dataset_per_class = forms.IntegerField(min_value=1)
    dataset_image_size = forms.IntegerField(min_value=8)
    dataset_profile = forms.ChoiceField(choices=_choices(STRUCTURE_PROFILES))
    dataset_images = forms.CharField(required=False)
    dataset_labels = forms.CharField(required=False)
    dataset_splits = forms.JSONField()

    cui_reduction = forms.ChoiceField(choices=_choices(REDUCTIONS))
    cui_class_balanced = forms.BooleanField(required=False)
    cui_class_subsets = forms.JSONField(required=False)

    split_candidates = forms.JSONField()
    split_max_candidates = forms.IntegerField(min_value=1)
    split_rate = forms.FloatField(min_value=0.0, max_value=1.0)

    stats_trials = forms.IntegerField(min_value=1)
    stats_sample_size = forms.IntegerField(min_value=1)

    channel_bandwidth_bytes_per_s = forms.FloatField()
    channel_latency_s = forms.FloatField(min_value=0.0)

    output_dir = forms.CharField()

    def clean_dataset_splits(self):
        splits = self.cleaned_data['dataset_splits']
        if (not isinstance(splits, list) or len(splits) != 3
                or any(not isinstance(v, (int, float)) or v < 0 for v in splits)
                or abs(sum(splits) - 1.0) > 1e-9):
            raise forms.ValidationError("Use três frações não negativas (train, val, test) que somem 1.")
        return tuple(float(v) for v in splits)

    def clean_cui_class_subsets(self):
        subsets = self.cleaned_data.get('cui_class_subsets') or {}
        if not isinstance(subsets, dict):
            raise forms.ValidationError("class_subsets deve mapear nome → lista de classes.")
        for name, classes in subsets.items():
            if not isinstance(classes, list) or not classes or not all(isinstance(c, int) for c in classes):
                raise forms.ValidationError(f"Subconjunto '{name}' deve ser uma lista não vazia de inteiros.")
        return {name: tuple(classes) for name, classes in subsets.items()}

    def clean_split_candidates(self):
        candidates = self.cleaned_data['split_candidates']
        if isinstance(candidates, str) and candidates in ('auto-cui', 'auto-cde'):
            return candidates
        if isinstance(candidates, list) and candidates and all(isinstance(c, int) and c >= 0 for c in candidates):
            return tuple(sorted(set(candidates)))
        raise forms.ValidationError("Use 'auto-cui', 'auto-cde' ou uma lista de índices de camada.")

    def clean_split_rate(self):
        rate = self.cleaned_data['split_rate']
        if not 0.0 < rate < 1.0:
            raise forms.ValidationError("A taxa de compressão deve estar em (0, 1).")
        return rate

    def clean_channel_bandwidth_bytes_per_s(self):
        bandwidth = self.cleaned_data['channel_bandwidth_bytes_per_s']
        if bandwidth <= 0:
            raise forms.ValidationError("A largura de banda deve ser positiva.")
        return bandwidth

    def clean(self):
        cleaned = super().clean()
        if cleaned.get('dataset_source') == 'idx':
            # Os caminhos referidos têm de existir no arranque
            for key in ('dataset_images', 'dataset_labels'):
                value = cleaned.get(key)
                if not value:
                    self.add_error(key, "Obrigatório quando a fonte é 'idx'.")
                elif not Path(value).exists():
                    self.add_error(key, f"Ficheiro não encontrado: {value}")
        class_count = cleaned.get('dataset_class_count')
        for name, classes in (cleaned.get('cui_class_subsets') or {}).items():
            if class_count and any(not 0 <= c < class_count for c in classes):
                self.add_error('cui_class_subsets', f"Subconjunto '{name}' tem classes fora de [0, {class_count}).")
        return cleaned


_JSON_FIELDS = ('dataset_splits', 'cui_class_subsets', 'split_candidates')


def _flatten(config: dict) -> dict:
    flat = {}
    for key, value in config.items():
        if key == 'training':
            continue
        if isinstance(value, dict) and key in ('dataset', 'cui', 'split', 'stats', 'channel'):
            for inner, inner_value in value.items():
                flat[f"{key}_{inner}"] = inner_value
        else:
            flat[key] = value
    # forms.JSONField espera texto JSON, como viria de um formulário
    for key in _JSON_FIELDS:
        if key in flat:
            flat[key] = json.dumps(flat[key])
    return flat


def _merge(defaults: dict, overrides: dict) -> dict:
    merged = dict(defaults)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict) and key != 'class_subsets':
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _form_errors(form: forms.Form) -> str:
    return '; '.join(
        f"{field}: {' '.join(str(m) for m in messages)}" for field, messages in form.errors.items()
    )


def build_experiment_config(data: dict) -> ExperimentConfig:
    """Valida um dicionário (completado com os valores por defeito)."""
    merged = _merge(default_config(), data)
    form = ExperimentConfigForm(data=_flatten(merged))
    if not form.is_valid():
        logger.warning(f"Configuração inválida: {form.errors.as_json()}")
        raise ConfigError(f"Configuração inválida: {_form_errors(form)}")

    training = {}
    for phase in PHASES:
        phase_form = TrainConfigForm(data={**merged['training'].get(phase, {}), 'phase': phase})
        if not phase_form.is_valid():
            raise ConfigError(f"Configuração de treino '{phase}' inválida: {_form_errors(phase_form)}")
        training[phase] = phase_form.to_config()

    c = form.cleaned_data
    candidates = c['split_candidates']
    return ExperimentConfig(
        name=c['name'],
        architecture=c['architecture'],
        seed=c['seed'],
        dataset=DatasetConfig(
            source=c['dataset_source'], class_count=c['dataset_class_count'],
            per_class=c['dataset_per_class'], image_size=c['dataset_image_size'],
            profile=c['dataset_profile'], images=c['dataset_images'] or '',
            labels=c['dataset_labels'] or '', splits=c['dataset_splits'],
        ),
        reduction=c['cui_reduction'],
        class_balanced=c['cui_class_balanced'],
        class_subsets=c['cui_class_subsets'],
        candidates=candidates if isinstance(candidates, str) else 'explicit',
        explicit_layers=() if isinstance(candidates, str) else candidates,
        max_candidates=c['split_max_candidates'],
        rate=c['split_rate'],
        training=training,
        resample_trials=c['stats_trials'],
        resample_size=c['stats_sample_size'],
        bandwidth_bytes_per_s=c['channel_bandwidth_bytes_per_s'],
        latency_s=c['channel_latency_s'],
        output_dir=c['output_dir'],
    )


def load_experiment_config(path) -> ExperimentConfig:
    """Lê e valida o ficheiro JSON; sem caminho usa a configuração por defeito."""
    if path is None:
        return build_experiment_config({})
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding='utf-8'))
    except OSError as exc:
        raise ConfigError(f"Não foi possível ler {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} não é JSON válido: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: a raiz do JSON deve ser um objeto.")
    return build_experiment_config(data)
