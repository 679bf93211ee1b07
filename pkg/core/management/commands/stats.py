from core.management.base import StageCommand


class Command(StageCommand):
    """
    Reamostragem da exatidão, F1 por classe e resumo com a correlação de postos.

    Como usar: python manage.py stats --config exp.json
    """
    help = 'Gera resample.csv, f1.csv e summary.json.'
    stages = ('stats',)

    def report(self, stage, result):
        self.stdout.write(f"Spearman CUI vs exatidão: {result['spearman_cui_vs_accuracy']}")
