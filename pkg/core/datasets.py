"""
Conjuntos de dados: leitura/escrita IDX (família MNIST) e gerador sintético
com pistas discriminativas em escalas espaciais controladas.
"""
import gzip
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DatasetError

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SPLIT_TAGS = ('train', 'val', 'test')
STRUCTURE_PROFILES = ('fine', 'coarse', 'mixed')


@dataclass
class Dataset:
    """
    Imagens (N, C, H, W) em [0, 1] com rótulos inteiros.

    `tags` associa cada imagem a exatamente uma partição (train/val/test),
    o que garante partições disjuntas.
    """
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    tags: np.ndarray | None = None
    name: str = 'dataset'
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"Imagens devem ser (N,C,H,W); recebi {self.images.shape}.")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} imagens para {len(self.labels)} rótulos.")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DatasetError(f"Rótulos fora de [0, {self.class_count}).")
        if self.tags is not None:
            self.tags = np.asarray(self.tags, dtype='<U5')
            if len(self.tags) != len(self.labels):
                raise DatasetError("Uma partição por imagem é obrigatória.")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def take(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        tags = self.tags[indices] if self.tags is not None else None
        return Dataset(self.images[indices], self.labels[indices], self.class_count, tags,
                       self.name, dict(self.provenance))

    def subset(self, tag: str) -> "Dataset":
        if self.tags is None:
            raise DatasetError(f"O conjunto '{self.name}' não tem partições; não há '{tag}'.")
        return self.take(np.flatnonzero(self.tags == tag))

    def restrict(self, classes) -> "Dataset":
        """Mantém só as imagens das classes dadas (os rótulos não mudam)."""
        wanted = np.asarray(sorted(set(int(c) for c in classes)), dtype=np.int64)
        return self.take(np.flatnonzero(np.isin(self.labels, wanted)))


def assign_splits(dataset: Dataset, fractions=(0.7, 0.15, 0.15), seed: int = 0) -> Dataset:
    """Partição estratificada por classe em train/val/test."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise DatasetError(f"Frações inválidas: {fractions}.")
    rng = np.random.default_rng(seed)
    tags = np.empty(len(dataset), dtype='<U5')
    for label in range(dataset.class_count):
        members = rng.permutation(np.flatnonzero(dataset.labels == label))
        n_train = int(round(fractions[0] * len(members)))
        n_val = int(round(fractions[1] * len(members)))
        tags[members[:n_train]] = 'train'
        tags[members[n_train:n_train + n_val]] = 'val'
        tags[members[n_train + n_val:]] = 'test'
    return Dataset(dataset.images, dataset.labels, dataset.class_count, tags,
                   dataset.name, dict(dataset.provenance))


# --- IDX ---

def _read_raw(path: Path) -> bytes:
    try:
        if path.suffix == '.gz':
            with gzip.open(path, 'rb') as handle:
                return handle.read()
        return path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"Não foi possível ler {path}: {exc}") from exc


def load_idx(images_path, labels_path, class_count: int | None = None) -> Dataset:
    """
    Lê um par de ficheiros IDX (opcionalmente .gz).

    Imagens: magic 0x00000803, N, linhas, colunas, píxeis u8.
    Rótulos: magic 0x00000801, N, rótulos u8.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    image_bytes, label_bytes = _read_raw(images_path), _read_raw(labels_path)

    if len(image_bytes) < 16:
        raise DatasetError(f"{images_path}: cabeçalho IDX truncado.")
    magic, count, rows, cols = struct.unpack('>IIII', image_bytes[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DatasetError(f"{images_path}: magic {magic:#010x} != {IDX_IMAGES_MAGIC:#010x}.")
    if len(label_bytes) < 8:
        raise DatasetError(f"{labels_path}: cabeçalho IDX truncado.")
    label_magic, label_count = struct.unpack('>II', label_bytes[:8])
    if label_magic != IDX_LABELS_MAGIC:
        raise DatasetError(f"{labels_path}: magic {label_magic:#010x} != {IDX_LABELS_MAGIC:#010x}.")
    if count != label_count:
        raise DatasetError(f"Contagens diferentes: {count} imagens e {label_count} rótulos.")

    expected = 16 + count * rows * cols
    if len(image_bytes) < expected:
        raise DatasetError(f"{images_path}: truncado ({len(image_bytes)} bytes, esperava {expected}).")
    if len(label_bytes) < 8 + count:
        raise DatasetError(f"{labels_path}: truncado ({len(label_bytes)} bytes, esperava {8 + count}).")

    pixels = np.frombuffer(image_bytes, dtype=np.uint8, count=count * rows * cols, offset=16)
    images = pixels.reshape(count, 1, rows, cols).astype(np.float32) / 255.0
    labels = np.frombuffer(label_bytes, dtype=np.uint8, count=count, offset=8).astype(np.int64)
    inferred = int(labels.max()) + 1 if count else 0
    classes = class_count if class_count is not None else inferred
    logger.info(f"IDX carregado: {count} imagens {rows}x{cols}, {classes} classes ({images_path.name}).")
    return Dataset(images, labels, classes, name=images_path.stem,
                   provenance={'source': 'idx', 'images': images_path.name, 'labels': labels_path.name})


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Grava imagens de um canal (quantizadas para u8) e rótulos em IDX."""
    if dataset.images.shape[1] != 1:
        raise DatasetError("IDX suporta apenas imagens de um canal.")
    count, _, rows, cols = dataset.images.shape
    pixels = np.clip(np.rint(dataset.images[:, 0] * 255.0), 0, 255).astype(np.uint8)
    Path(images_path).parent.mkdir(parents=True, exist_ok=True)
    Path(images_path).write_bytes(struct.pack('>IIII', IDX_IMAGES_MAGIC, count, rows, cols) + pixels.tobytes())
    Path(labels_path).write_bytes(
        struct.pack('>II', IDX_LABELS_MAGIC, count) + dataset.labels.astype(np.uint8).tobytes()
    )


# --- Gerador sintético ---

def _fine_pattern(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Grelha de alta frequência: orientação e período dependem da classe."""
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    angle = np.pi * (label % 4) / 4
    period = 2.0 + (label // 4) % 3
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * (x * np.cos(angle) + y * np.sin(angle)) / period + phase)
    return 0.5 + 0.35 * wave


def _coarse_pattern(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Forma grande (disco, quadrado, anel, cruz, barras...) com jitter de posição."""
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = size / 2 + rng.uniform(-size / 8, size / 8, 2)
    radius = size * (0.22 + 0.04 * rng.random()) * (1.0 + 0.15 * (label // 8))
    dy, dx = y - cy, x - cx
    dist = np.hypot(dy, dx)
    shape = label % 8
    if shape == 0:
        mask = dist < radius
    elif shape == 1:
        mask = (np.abs(dy) < radius) & (np.abs(dx) < radius)
    elif shape == 2:
        mask = (dist < radius) & (dist > radius * 0.55)
    elif shape == 3:
        mask = ((np.abs(dy) < radius * 0.3) & (np.abs(dx) < radius * 1.2)) | \
               ((np.abs(dx) < radius * 0.3) & (np.abs(dy) < radius * 1.2))
    elif shape == 4:
        mask = (np.abs(dy) < radius * 0.35) & (np.abs(dx) < radius * 1.5)
    elif shape == 5:
        mask = (np.abs(dx) < radius * 0.35) & (np.abs(dy) < radius * 1.5)
    elif shape == 6:
        mask = (np.abs(dy - dx) < radius * 0.4) & (dist < radius * 1.5)
    else:
        offset = radius * 0.8
        mask = (np.hypot(dy, dx - offset) < radius * 0.5) | (np.hypot(dy, dx + offset) < radius * 0.5)
    return np.where(mask, 0.85, 0.15)


def synth_dataset(class_count: int, per_class: int, image_size: int = 32,
                  structure_profile: str = 'mixed', seed: int = 0, noise: float = 0.1) -> Dataset:
    """
    Conjunto balanceado e determinístico para um seed fixo.

    'fine' coloca a pista da classe numa textura de alta frequência,
    'coarse' numa forma grande; 'mixed' usa 'fine' na primeira metade das
    classes e 'coarse' na segunda.
    """
    if class_count < 1 or per_class < 1:
        raise DatasetError(f"Conjunto vazio: class_count={class_count}, per_class={per_class}.")
    if structure_profile not in STRUCTURE_PROFILES:
        raise DatasetError(f"Perfil '{structure_profile}' desconhecido; use um de {STRUCTURE_PROFILES}.")
    if image_size < 8:
        raise DatasetError(f"image_size={image_size} é demasiado pequeno (mínimo 8).")

    rng = np.random.default_rng(seed)
    images = np.empty((class_count * per_class, 1, image_size, image_size), dtype=np.float32)
    labels = np.repeat(np.arange(class_count), per_class)
    for position, label in enumerate(labels):
        fine = structure_profile == 'fine' or (structure_profile == 'mixed' and label < class_count // 2)
        pattern = _fine_pattern(label, image_size, rng) if fine else _coarse_pattern(label, image_size, rng)
        pattern = pattern + rng.normal(0.0, noise, pattern.shape)
        images[position, 0] = np.clip(pattern, 0.0, 1.0)
    logger.info(
        f"Conjunto sintético: {class_count} classes x {per_class} imagens {image_size}x{image_size}, "
        f"perfil '{structure_profile}', seed={seed}."
    )
    return Dataset(images, labels, class_count, name=f"synth-{structure_profile}",
                   provenance={'source': 'synth', 'profile': structure_profile, 'seed': seed,
                               'per_class': per_class, 'image_size': image_size})


def fine_classes(class_count: int, structure_profile: str) -> list[int]:
    """Classes cuja pista é textura fina no perfil dado."""
    if structure_profile == 'fine':
        return list(range(class_count))
    if structure_profile == 'mixed':
        return list(range(class_count // 2))
    return []
