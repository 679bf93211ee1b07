from pathlib import Path

from core.datasets import STRUCTURE_PROFILES, synth_dataset, write_idx
from core.management.base import ISplitCommand


class Command(ISplitCommand):
    """
    Grava um conjunto sintético em formato IDX (imagens + rótulos).

    O resultado serve de fonte 'idx' para qualquer outro subcomando.

    Como usar: python manage.py make_synth --out data/ --classes 8 --per-class 100
    """
    help = 'Gera um conjunto sintético determinístico e grava-o em IDX.'

    def add_command_arguments(self, parser):
        parser.add_argument('--classes', type=int, default=8)
        parser.add_argument('--per-class', type=int, default=100)
        parser.add_argument('--size', type=int, default=32)
        parser.add_argument('--profile', choices=STRUCTURE_PROFILES, default='mixed')
        parser.add_argument('--seed', type=int, default=0)

    def run(self, **options):
        out = Path(options['out'] or 'data')
        self.stdout.write(self.style.NOTICE('A gerar o conjunto sintético...'))
        dataset = synth_dataset(options['classes'], options['per_class'], options['size'],
                                options['profile'], seed=options['seed'])
        stem = f"synth-{options['profile']}-{options['seed']}"
        images, labels = out / f"{stem}-images.idx", out / f"{stem}-labels.idx"
        write_idx(dataset, images, labels)
        self.stdout.write(self.style.SUCCESS(f"{len(dataset)} imagens gravadas em {images} e {labels}."))
