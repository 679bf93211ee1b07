from core.management.base import StageCommand


class Command(StageCommand):
    """
    Emite os gráficos SVG a partir dos CSV já gravados.

    Como usar: python manage.py plot --config exp.json
    """
    help = 'Gráficos SVG: CUI com candidatas e exatidão, CUI vs Gradients, por classe, caixas.'
    stages = ('plot',)

    def report(self, stage, result):
        for path in result['svg']:
            self.stdout.write(f"  {path}")
