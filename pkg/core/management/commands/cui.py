from core.config import REDUCTIONS
from core.management.base import StageCommand


class Command(StageCommand):
    """
    Calcula as curvas CUI (Grad-CAM) e Gradients na partição de validação.

    Como usar: python manage.py cui --config exp.json [--class-balanced]
    """
    help = 'Curvas CUI geral, por classe, por subconjunto e baseline Gradients.'
    stages = ('cui',)

    def add_command_arguments(self, parser):
        parser.add_argument('--class-balanced', action='store_true',
                            help='Cada classe contribui igualmente para a curva.')
        parser.add_argument('--reduction', choices=REDUCTIONS, help='Redução do mapa (soma ou média).')

    def overrides(self, options):
        overrides = {}
        if options['class_balanced']:
            overrides['class_balanced'] = True
        if options['reduction']:
            overrides['reduction'] = options['reduction']
        return overrides

    def report(self, stage, result):
        self.stdout.write(f"Máximo da CUI na camada {result['argmax']}.")
