"""
Orquestração da experiência: dados → treino → CUI → divisão → retreino →
varrimento → estatística → gráficos.

Cada estágio lê do diretório de saída o que os anteriores gravaram, por
isso correr os subcomandos um a um produz os mesmos artefactos que
`run_pipeline`. Os artefactos de um estágio concluído ficam em disco
mesmo que um estágio seguinte falhe.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

from django.conf import settings
from django.utils import timezone

from . import plots, reporting
from .bottleneck import build_bottleneck, finetune, load_split_artifacts, save_split_artifacts, train_ae
from .config import ExperimentConfig
from .datasets import Dataset, assign_splits, load_idx, synth_dataset
from .exceptions import BottleneckError, ISplitError, StageError
from .interpretability import (
    candidate_coverage,
    cde_candidates,
    cui_curve,
    gradients_baseline_curve,
    per_class_curves,
    select_split_points,
)
from .models import ExperimentRun, SplitEvaluation
from .network import build_model, checkpoint_load, checkpoint_save, layer_sizes
from .runtime import ChannelModel, sweep_report
from .stats import per_class_f1_report, rank_correlation, stats_resample
from .training import accuracy, train_classifier

logger = logging.getLogger(__name__)

STAGE_NAMES = ('data', 'train', 'cui', 'split', 'retrain', 'sweep', 'stats', 'plot')


@dataclass
class PipelineContext:
    """Configuração, diretório de saída e o conjunto de dados (construído uma vez)."""
    config: ExperimentConfig
    output_dir: Path
    threads: int = 1
    _dataset: Dataset | None = field(default=None, repr=False)

    @classmethod
    def create(cls, config: ExperimentConfig, output_dir=None) -> "PipelineContext":
        directory = Path(output_dir or config.output_dir)
        directory.mkdir(parents=True, exist_ok=True)
        return cls(config, directory, settings.ISPLIT['THREADS'])

    def path(self, *parts: str) -> Path:
        return self.output_dir.joinpath(*parts)

    def write_config(self) -> Path:
        """config.json com a configuração efetiva desta execução."""
        return reporting.write_json(self.config.to_dict(), self.path('config.json'))

    @property
    def dataset(self) -> Dataset:
        if self._dataset is None:
            self._dataset = build_dataset(self.config)
        return self._dataset

    def load_model(self):
        return checkpoint_load(self.path('model.ispl'))

    def split_dir(self, layer: int) -> Path:
        return self.path('splits', f'layer_{layer:02d}')

    def cui_options(self) -> dict:
        return {
            'reduction': self.config.reduction,
            'parallelism': self.threads,
            'chunk_size': settings.ISPLIT['CUI_CHUNK_SIZE'],
        }


def build_dataset(config: ExperimentConfig) -> Dataset:
    """Conjunto com partições train/val/test determinísticas para o seed da experiência."""
    source = config.dataset
    if source.source == 'idx':
        dataset = load_idx(source.images, source.labels, source.class_count)
    else:
        dataset = synth_dataset(source.class_count, source.per_class, source.image_size,
                                source.profile, seed=config.seed)
    return assign_splits(dataset, source.splits, seed=config.seed)


# --- Estágios ---

def stage_data(ctx: PipelineContext) -> dict:
    dataset = ctx.dataset
    summary = {
        'name': dataset.name,
        'class_count': dataset.class_count,
        'image_shape': list(dataset.image_shape),
        'class_counts': [int(c) for c in dataset.class_counts],
        'splits': {tag: len(dataset.subset(tag)) for tag in ('train', 'val', 'test')},
        'provenance': dataset.provenance,
    }
    reporting.write_json(summary, ctx.path('dataset.json'))
    return summary


def stage_train(ctx: PipelineContext) -> dict:
    config, dataset = ctx.config, ctx.dataset
    train_config = config.train_config('classifier')
    train, val = dataset.subset('train'), dataset.subset('val')
    model = build_model(config.architecture, dataset.image_shape, dataset.class_count, seed=config.seed)
    trained, history = train_classifier(model, train.images, train.labels, train_config, val.images, val.labels)
    trained.metadata.update({'dataset': dataset.name, 'seed': config.seed, 'epochs': train_config.epochs})
    checkpoint_save(trained, ctx.path('model.ispl'))
    test = dataset.subset('test')
    summary = {
        'history': history,
        'layers': [layer.to_dict() for layer in trained.layers],
        'layer_sizes': layer_sizes(trained),
        'test_accuracy': accuracy(trained.predict(test.images), test.labels),
    }
    reporting.write_json(summary, ctx.path('train.json'))
    return summary


def stage_cui(ctx: PipelineContext) -> dict:
    """Curvas CUI e Gradients sobre a partição de validação."""
    model, val = ctx.load_model(), ctx.dataset.subset('val')
    options = {**ctx.cui_options(), 'class_balanced': ctx.config.class_balanced}
    curve = cui_curve(model, val, **options)
    reporting.write_cui_csv(curve, ctx.path('cui.csv'))
    baseline = gradients_baseline_curve(model, val, **options)
    reporting.write_cui_csv(baseline, ctx.path('cui_gradients.csv'))

    per_class = per_class_curves(model, val, **ctx.cui_options())
    for label, class_curve in per_class.items():
        reporting.write_cui_csv(class_curve, ctx.path('cui_classes', f'class_{label:02d}.csv'))
    subsets = {}
    for name, classes in sorted(ctx.config.class_subsets.items()):
        subset_curve = cui_curve(model, val, class_subset=classes, **options)
        reporting.write_cui_csv(subset_curve, ctx.path('cui_subsets', f'{name}.csv'))
        subsets[name] = {'classes': list(classes), 'argmax': subset_curve.argmax()}

    summary = {
        'argmax': curve.argmax(),
        'gradients_argmax': baseline.argmax(),
        'class_argmax': {str(label): c.argmax() for label, c in per_class.items()},
        'subsets': subsets,
    }
    reporting.write_json(summary, ctx.path('cui.json'))
    return summary


def _select_layers(ctx: PipelineContext, model, curve) -> tuple[list[int], list[int], list[int], list[int]]:
    config = ctx.config
    ranked_cui = select_split_points(curve)
    cde = cde_candidates(layer_sizes(model))
    if config.candidates == 'auto-cui':
        pool = ranked_cui
    elif config.candidates == 'auto-cde':
        pool = cde
    else:
        pool = list(config.explicit_layers)
    selected, skipped = [], []
    for layer in pool:
        if len(selected) >= config.max_candidates:
            break
        try:
            if not 0 <= layer < len(model.layers) - 1:
                raise BottleneckError(f"camada {layer} fora do modelo")
            build_bottleneck(model.layers[layer].output_shape, config.rate, layer)
        except BottleneckError as exc:
            if config.candidates == 'explicit':
                raise BottleneckError(f"Candidato explícito {layer} inválido: {exc}") from exc
            logger.warning(f"Candidato {layer} ignorado: {exc}")
            skipped.append(layer)
            continue
        selected.append(layer)
    return ranked_cui, cde, selected, skipped


def stage_split(ctx: PipelineContext) -> dict:
    """Escolhe as camadas candidatas e calcula o bottleneck de cada uma."""
    model = ctx.load_model()
    curve = reporting.read_cui_csv(ctx.path('cui.csv'))
    ranked_cui, cde, selected, skipped = _select_layers(ctx, model, curve)
    if not selected:
        raise BottleneckError("Nenhuma camada candidata admite um bottleneck.")
    summary = {
        'mode': ctx.config.candidates,
        'cui_ranked': ranked_cui,
        'cde': cde,
        'selected': sorted(selected),
        'skipped': skipped,
        'coverage': candidate_coverage([layer for layer in cde if layer in curve.values], curve),
        'bottlenecks': {
            str(layer): build_bottleneck(model.layers[layer].output_shape, ctx.config.rate, layer).to_dict()
            for layer in sorted(selected)
        },
    }
    reporting.write_json(summary, ctx.path('candidates.json'))
    return summary


def stage_retrain(ctx: PipelineContext) -> dict:
    """Fase 'ae' e fine-tuning para cada camada escolhida."""
    config, dataset = ctx.config, ctx.dataset
    model = ctx.load_model()
    candidates = reporting.read_json(ctx.path('candidates.json'))
    train, val, test = dataset.subset('train'), dataset.subset('val'), dataset.subset('test')
    results = {}
    for layer in candidates['selected']:
        spec = build_bottleneck(model.layers[layer].output_shape, config.rate, layer)
        bottleneck = train_ae(model, spec, train, config.train_config('ae'))
        plan, _ = finetune(model, bottleneck, train, config.train_config('finetune'), eval_dataset=val)
        test_accuracy = accuracy(plan.predict(test.images), test.labels)
        save_split_artifacts(plan, ctx.split_dir(layer), extra={'test_accuracy': test_accuracy})
        results[str(layer)] = test_accuracy
        logger.info(f"Divisão na camada {layer} ({model.layers[layer].name}): exatidão de teste {test_accuracy:.4f}.")
    reporting.write_json({'test_accuracy': results}, ctx.path('retrain.json'))
    return results


def _load_plans(ctx: PipelineContext, layers) -> dict:
    return {layer: load_split_artifacts(ctx.split_dir(layer)) for layer in layers}


def stage_sweep(ctx: PipelineContext) -> dict:
    model = ctx.load_model()
    candidates = reporting.read_json(ctx.path('candidates.json'))
    loaded = _load_plans(ctx, candidates['selected'])
    accuracies = {layer: sidecar.get('test_accuracy') for layer, (_, sidecar) in loaded.items()}
    channel = ChannelModel(ctx.config.bandwidth_bytes_per_s, ctx.config.latency_s)
    report = sweep_report(model, [plan for plan, _ in loaded.values()], channel,
                          dataset=ctx.dataset.subset('test'), accuracies=accuracies)
    reporting.write_sweep_csv(report, ctx.path('sweep.csv'))
    reporting.write_json(report.reference(), ctx.path('sweep_reference.json'))
    return {'rows': len(report.rows), 'reference': report.reference()}


def _finite(value) -> bool:
    return value is not None and math.isfinite(value)


def stage_stats(ctx: PipelineContext) -> dict:
    """Reamostragem, F1 por classe da melhor divisão e o resumo final."""
    config, dataset = ctx.config, ctx.dataset
    model = ctx.load_model()
    val, test = dataset.subset('val'), dataset.subset('test')
    candidates = reporting.read_json(ctx.path('candidates.json'))
    loaded = _load_plans(ctx, candidates['selected'])
    accuracies = {layer: sidecar.get('test_accuracy') for layer, (_, sidecar) in loaded.items()}

    size = min(config.resample_size, len(val))
    results = {'unsplit': stats_resample(model, val, size, config.resample_trials, config.seed)}
    for layer, (plan, _) in loaded.items():
        results[f'layer_{layer:02d}'] = stats_resample(plan, val, size, config.resample_trials, config.seed)
    reporting.write_resample_csv(results, ctx.path('resample.csv'))

    measured = {layer: acc for layer, acc in accuracies.items() if _finite(acc)}
    best_layer = max(measured, key=lambda layer: (measured[layer], -layer)) if measured else None
    f1_rho = None
    if best_layer is not None:
        report = per_class_f1_report(model, loaded[best_layer][0], test)
        reporting.write_f1_csv(report, ctx.path('f1.csv'))
        f1_rho = report.rho

    curve = reporting.read_cui_csv(ctx.path('cui.csv'))
    paired = [(curve.values[layer], measured[layer]) for layer in sorted(measured) if layer in curve.values]
    rho = rank_correlation(*zip(*paired)) if len(paired) >= 2 else None
    summary = {
        'name': config.name,
        'seed': config.seed,
        'cui_argmax': curve.argmax(),
        'best_split_layer': best_layer,
        'split_accuracy': {str(layer): acc for layer, acc in sorted(accuracies.items())},
        'spearman_cui_vs_accuracy': rho,
        'f1_rank_correlation': f1_rho,
        'resample': {label: result.to_dict() for label, result in results.items()},
    }
    reporting.write_json(summary, ctx.path('summary.json'))
    return summary


def stage_plot(ctx: PipelineContext, timestamp: str | None = None) -> dict:
    curve = reporting.read_cui_csv(ctx.path('cui.csv'))
    baseline = reporting.read_cui_csv(ctx.path('cui_gradients.csv'), method='gradients')
    written = []
    candidates_path, retrain_path = ctx.path('candidates.json'), ctx.path('retrain.json')
    candidates = reporting.read_json(candidates_path)['cui_ranked'] if candidates_path.exists() else []
    accuracies = None
    if retrain_path.exists():
        accuracies = {int(k): v for k, v in reporting.read_json(retrain_path)["test_accuracy"].items() if _finite(v)}
    written.append(plots.write_svg(
        plots.cui_plot(curve, candidates, accuracies, title=f'CUI - {ctx.config.name}', timestamp=timestamp),
        ctx.path('cui.svg'),
    ))
    written.append(plots.write_svg(
        plots.overlay_plot({'Grad-CAM CUI': curve, 'Gradients': baseline}, title='CUI vs Gradients',
                           timestamp=timestamp),
        ctx.path('cui_vs_gradients.svg'),
    ))
    class_files = sorted(ctx.path('cui_classes').glob('class_*.csv'))
    if class_files:
        class_curves = {path.stem: reporting.read_cui_csv(path) for path in class_files}
        written.append(plots.write_svg(
            plots.overlay_plot(class_curves, title='CUI por classe', timestamp=timestamp),
            ctx.path('cui_classes.svg'),
        ))
    if ctx.path('resample.csv').exists():
        written.append(plots.write_svg(
            plots.box_plot(reporting.read_resample_csv(ctx.path('resample.csv')), timestamp=timestamp),
            ctx.path('resample_box.svg'),
        ))
    return {'svg': [str(path.relative_to(ctx.output_dir)) for path in written]}


STAGES = {
    'data': stage_data,
    'train': stage_train,
    'cui': stage_cui,
    'split': stage_split,
    'retrain': stage_retrain,
    'sweep': stage_sweep,
    'stats': stage_stats,
    'plot': stage_plot,
}


def run_stage(ctx: PipelineContext, name: str) -> dict:
    """Corre um estágio; qualquer falha vira StageError com o nome do estágio."""
    logger.info(f"Estágio '{name}' a começar ({ctx.output_dir}).")
    try:
        result = STAGES[name](ctx)
    except StageError:
        raise
    except ISplitError as exc:
        raise StageError(name, str(exc), exit_code=exc.exit_code) from exc
    except (OSError, KeyError, ValueError) as exc:
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
    logger.info(f"Estágio '{name}' concluído.")
    return result


def _record_evaluations(run: ExperimentRun, ctx: PipelineContext) -> None:
    curve = reporting.read_cui_csv(ctx.path('cui.csv'))
    for row in reporting.read_sweep_csv(ctx.path('sweep.csv')):
        SplitEvaluation.objects.create(
            run=run, layer_index=row['layer_index'], layer_name=row['layer_name'],
            cui_value=curve.values.get(row['layer_index']), encoded_bytes=row['encoded_bytes'],
            transfer_s=row['transfer_s'],
            accuracy=row['accuracy'] if _finite(row['accuracy']) else None,
        )


def run_pipeline(config: ExperimentConfig, output_dir=None, stages=STAGE_NAMES,
                 record: bool = True) -> Path:
    """
    Corre os estágios por ordem e devolve o diretório do relatório.

    Com `record` a execução fica registada em ExperimentRun; uma falha marca
    a execução como FAILED com o estágio e relança o StageError.
    """
    ctx = PipelineContext.create(config, output_dir)
    ctx.write_config()
    run = None
    if record:
        run = ExperimentRun.objects.create(
            name=config.name, seed=config.seed, config=config.to_dict(), output_dir=str(ctx.output_dir),
        )
    for name in stages:
        try:
            run_stage(ctx, name)
        except StageError as exc:
            logger.error(f"Pipeline interrompido: {exc}")
            if run is not None:
                run.status = ExperimentRun.Status.FAILED
                run.failed_stage = exc.stage
                run.error_message = str(exc)
                run.finished_at = timezone.now()
                run.save()
            raise
    if run is not None:
        if ctx.path('sweep.csv').exists():
            _record_evaluations(run, ctx)
        run.refresh_from_db()
        run.status = ExperimentRun.Status.DONE
        run.finished_at = timezone.now()
        run.save()
    logger.info(f"Pipeline '{config.name}' concluído em {ctx.output_dir}.")
    return ctx.output_dir
