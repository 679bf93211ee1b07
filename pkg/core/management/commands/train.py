from core.management.base import StageCommand


class Command(StageCommand):
    """
    Gera/carrega o conjunto de dados e treina o classificador completo.

    Como usar: python manage.py train --config exp.json
    """
    help = 'Treina o classificador (estágios data e train); grava model.ispl.'
    stages = ('data', 'train')

    def report(self, stage, result):
        if stage == 'train':
            self.stdout.write(f"Exatidão de teste: {result['test_accuracy']:.4f}")
