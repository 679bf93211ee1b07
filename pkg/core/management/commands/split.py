from core.management.base import StageCommand


class Command(StageCommand):
    """
    Seleciona as camadas candidatas (auto-cui, auto-cde ou lista explícita).

    Como usar: python manage.py split --config exp.json
    """
    help = 'Escolhe os pontos de divisão e calcula o bottleneck de cada um.'
    stages = ('split',)

    def report(self, stage, result):
        self.stdout.write(f"Candidatas: {result['selected']} (CDE: {result['cde']}).")
