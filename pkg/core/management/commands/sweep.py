from core.management.base import StageCommand


class Command(StageCommand):
    """
    Tabela de varrimento: bytes codificados, transferência estimada e exatidão.

    Como usar: python manage.py sweep --config exp.json
    """
    help = 'Gera sweep.csv com uma linha por ponto de divisão.'
    stages = ('sweep',)

    def report(self, stage, result):
        reference = result['reference']
        self.stdout.write(
            f"{result['rows']} linhas; referência cloud-only: {reference['input_bytes']} bytes, "
            f"{reference['transfer_s']:.4f}s."
        )
