from core.management.base import ISplitCommand
from core.pipeline import run_pipeline


class Command(ISplitCommand):
    """
    Corre a experiência completa: data, train, cui, split, retrain, sweep, stats, plot.

    A execução fica registada na tabela ExperimentRun (use --no-record para não registar).

    Como usar: python manage.py run_pipeline --config exp.json --out runs/exp
    """
    help = 'Pipeline completo do treino aos gráficos.'

    def add_command_arguments(self, parser):
        parser.add_argument('--no-record', action='store_true', help='Não regista a execução na base de dados.')

    def run(self, **options):
        config = self.load_config(options)
        self.stdout.write(self.style.NOTICE(f"A iniciar o pipeline '{config.name}'..."))
        directory = run_pipeline(config, record=not options['no_record'])
        self.stdout.write(self.style.SUCCESS(f"Relatório em {directory}"))
