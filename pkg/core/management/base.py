import json
import logging
from dataclasses import replace

from django.core.management.base import BaseCommand, CommandError

from core.config import default_config
from core.exceptions import ISplitError
from core.forms import load_experiment_config
from core.pipeline import PipelineContext, run_stage

logger = logging.getLogger(__name__)


class ISplitCommand(BaseCommand):
    """
    Base dos subcomandos do toolkit.

    Trata `--config`, `--out` e `--print-default-config`, e converte
    qualquer ISplitError num CommandError com o código de saída certo
    (1 config, 2 dados, 3 estágio, 4 rede).
    """

    def add_arguments(self, parser):
        parser.add_argument('--config', help='Ficheiro JSON da experiência (omisso: valores por defeito).')
        parser.add_argument('--out', help='Diretório de saída (sobrepõe output_dir da configuração).')
        parser.add_argument('--print-default-config', action='store_true',
                            help='Mostra a configuração por defeito e sai.')
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def handle(self, *args, **options):
        if options['print_default_config']:
            self.stdout.write(json.dumps(default_config(), indent=2, sort_keys=True))
            return
        try:
            self.run(**options)
        except ISplitError as exc:
            logger.error(f"{type(exc).__name__}: {exc}")
            raise CommandError(str(exc), returncode=exc.exit_code) from exc

    def run(self, **options):
        raise NotImplementedError

    def load_config(self, options):
        config = load_experiment_config(options.get('config'))
        if options.get('out'):
            config = replace(config, output_dir=options['out'])
        return config

    def context(self, options, **overrides) -> PipelineContext:
        config = self.load_config(options)
        if overrides:
            config = replace(config, **overrides)
        return PipelineContext.create(config)


class StageCommand(ISplitCommand):
    """Subcomando que corre um ou mais estágios do pipeline sobre o mesmo diretório."""
    stages: tuple = ()

    def overrides(self, options) -> dict:
        return {}

    def run(self, **options):
        ctx = self.context(options, **self.overrides(options))
        ctx.write_config()
        for stage in self.stages:
            result = run_stage(ctx, stage)
            self.stdout.write(self.style.SUCCESS(f"Estágio '{stage}' concluído em {ctx.output_dir}."))
            self.report(stage, result)

    def report(self, stage: str, result) -> None:
        pass
