from core.management.base import StageCommand


class Command(StageCommand):
    """
    Treina o bottleneck de cada candidata (fase 'ae') e afina a rede inteira.

    Como usar: python manage.py retrain --config exp.json
    """
    help = 'Fases ae + finetune por candidata; grava head.ispl, tail.ispl e split.json.'
    stages = ('retrain',)

    def report(self, stage, result):
        for layer, value in result.items():
            self.stdout.write(f"Camada {layer}: exatidão de teste {value:.4f}")
