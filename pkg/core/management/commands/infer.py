import json

import numpy as np
from django.core.management.base import CommandError

from core.datasets import load_idx
from core.exceptions import DatasetError
from core.management.base import ISplitCommand
from core.runtime import head_infer


class Command(ISplitCommand):
    """
    Cliente da cabeça: corre cabeça + encoder localmente e envia o latente.

    A imagem vem de um ficheiro .npy (C,H,W) ou de um ficheiro IDX de
    imagens com `--index`.

    Como usar: python manage.py infer --head head.ispl --server 127.0.0.1:9400 --image img.npy
    """
    help = 'Inferência dividida de uma imagem contra o servidor da cauda.'

    def add_command_arguments(self, parser):
        parser.add_argument('--head', required=True, help='Checkpoint da cabeça (head.ispl).')
        parser.add_argument('--server', required=True, help='host:porta do servidor da cauda.')
        parser.add_argument('--image', required=True, help='Imagem .npy ou ficheiro IDX de imagens.')
        parser.add_argument('--labels', help='Rótulos IDX (obrigatório com imagens IDX).')
        parser.add_argument('--index', type=int, default=0, help='Índice da imagem no ficheiro IDX.')
        parser.add_argument('--timeout-ms', type=int, default=5000)

    def _image(self, options) -> np.ndarray:
        path = options['image']
        if path.endswith('.npy'):
            try:
                return np.load(path).astype(np.float32)
            except (OSError, ValueError) as exc:
                raise DatasetError(f"Não foi possível ler {path}: {exc}") from exc
        if not options['labels']:
            raise CommandError('--labels é obrigatório com imagens IDX.', returncode=1)
        dataset = load_idx(path, options['labels'])
        if not 0 <= options['index'] < len(dataset):
            raise DatasetError(f"Índice {options['index']} fora de [0, {len(dataset)}).")
        return dataset.images[options['index']]

    def run(self, **options):
        logits, timing = head_infer(self._image(options), options['head'], options['server'],
                                    options['timeout_ms'] / 1000)
        self.stdout.write(json.dumps({
            'prediction': int(np.argmax(logits)),
            'logits': [float(v) for v in np.ravel(logits)],
            'timing_ms': timing.to_dict(),
        }, indent=2))
