#!/usr/bin/env python3
"""
Dataset ingestion for Cityscapes-layout corpora
Train-id encoding, augmentation, torch datasets, a synthetic night-scene generator
and prediction colorization
"""

import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image
from pydantic import BaseModel, ConfigDict, field_validator
from torch.utils.data import Dataset, Sampler

from config import AugConfig
from errors import AlignmentError, InvalidConfig, LayoutError, RHRSegError, ShapeError
from logging_system import seg_logger, log_dataset_indexed

IGNORE_INDEX = 255
NUM_TRAIN_CLASSES = 19
SeedLike = Union[int, np.random.SeedSequence]
DomainTag = Literal['source', 'target', 'synthetic']

CLASS_NAMES = (
    'road', 'sidewalk', 'building', 'wall', 'fence', 'pole', 'traffic light',
    'traffic sign', 'vegetation', 'terrain', 'sky', 'person', 'rider', 'car',
    'truck', 'bus', 'train', 'motorcycle', 'bicycle',
)

# Cityscapes labelIds -> train ids, in train-id order
CITYSCAPES_RAW_IDS = (7, 8, 11, 12, 13, 17, 19, 20, 21, 22, 23, 24, 25, 26, 27, 28, 31, 32, 33)

CITYSCAPES_COLORS = (
    (128, 64, 128), (244, 35, 232), (70, 70, 70), (102, 102, 156), (190, 153, 153),
    (153, 153, 153), (250, 170, 30), (220, 220, 0), (107, 142, 35), (152, 251, 152),
    (70, 130, 180), (220, 20, 60), (255, 0, 0), (0, 0, 142), (0, 0, 70),
    (0, 60, 100), (0, 80, 100), (0, 0, 230), (119, 11, 32),
)


class ClassTaxonomy(BaseModel):
    """Ordered classes with raw-id encoding and display colors"""
    model_config = ConfigDict(frozen=True)

    names: Tuple[str, ...]
    raw_to_train: Dict[int, int]
    colors: Tuple[Tuple[int, int, int], ...]

    @field_validator('names')
    @classmethod
    def validate_names(cls, v):
        if len(v) != NUM_TRAIN_CLASSES:
            raise ValueError(f'taxonomy must list {NUM_TRAIN_CLASSES} classes, got {len(v)}')
        return v

    @field_validator('colors')
    @classmethod
    def validate_colors(cls, v):
        if len(v) != NUM_TRAIN_CLASSES or len(set(v)) != len(v):
            raise ValueError('taxonomy colors must be 19 distinct triples')
        if (0, 0, 0) in v:
            raise ValueError('black is reserved for ignored pixels')
        return v

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def lookup_table(self) -> np.ndarray:
        lut = np.full(256, IGNORE_INDEX, dtype=np.uint8)
        for raw, train in self.raw_to_train.items():
            if 0 <= raw < 256:
                lut[raw] = train
        return lut

    def palette(self) -> np.ndarray:
        palette = np.zeros((256, 3), dtype=np.uint8)
        palette[:self.num_classes] = np.asarray(self.colors, dtype=np.uint8)
        return palette


CITYSCAPES_TAXONOMY = ClassTaxonomy(
    names=CLASS_NAMES,
    raw_to_train={raw: train for train, raw in enumerate(CITYSCAPES_RAW_IDS)},
    colors=CITYSCAPES_COLORS,
)

# Labels already stored as train ids
TRAIN_ID_TAXONOMY = ClassTaxonomy(
    names=CLASS_NAMES,
    raw_to_train={i: i for i in range(NUM_TRAIN_CLASSES)},
    colors=CITYSCAPES_COLORS,
)


class Sample(BaseModel):
    model_config = ConfigDict(frozen=True)

    image_path: Path
    label_path: Optional[Path] = None
    domain_tag: DomainTag = 'source'


@dataclass(frozen=True)
class LayoutTemplate:
    """Where images and labels live for one corpus"""
    image_dir: str
    image_suffix: str
    label_dir: str
    label_suffix: str
    taxonomy: ClassTaxonomy


LAYOUTS: Dict[str, LayoutTemplate] = {
    'cityscapes': LayoutTemplate('leftImg8bit/{split}', '_leftImg8bit.png',
                                 'gtFine/{split}', '_gtFine_labelIds.png', CITYSCAPES_TAXONOMY),
    'darkzurich': LayoutTemplate('rgb_anon/{split}', '_rgb_anon.png',
                                 'gt/{split}', '_gt_labelIds.png', CITYSCAPES_TAXONOMY),
    'nightcity': LayoutTemplate('images/{split}', '.png',
                                'labels/{split}', '_labelIds.png', CITYSCAPES_TAXONOMY),
    'synthetic': LayoutTemplate('images/{split}', '.png',
                                'labels/{split}', '.png', TRAIN_ID_TAXONOMY),
}


def layout_template(layout: str) -> LayoutTemplate:
    if layout not in LAYOUTS:
        raise LayoutError(f"unknown dataset layout '{layout}' (known: {', '.join(LAYOUTS)})")
    return LAYOUTS[layout]


# ===== INDEXING =====

def index_dataset(root: Path, layout: str, split: str,
                  domain_tag: Optional[DomainTag] = None) -> List[Sample]:
    """Pair every image of a split with its label file, in lexicographic order.

    Labels are required for train/val splits unless the samples are tagged as
    target-domain data; images without a label in a supervised split are
    reported as orphans and left out.
    """
    root = Path(root)
    template = layout_template(layout)
    if domain_tag is None:
        domain_tag = 'synthetic' if layout == 'synthetic' else 'source'
    if not root.is_dir():
        raise LayoutError(f"dataset root does not exist: {root}")

    image_dir = root / template.image_dir.format(split=split)
    label_dir = root / template.label_dir.format(split=split)
    if not image_dir.is_dir():
        raise LayoutError(f"missing image directory for {layout}/{split}: {image_dir}")

    images = sorted(p for p in image_dir.rglob(f"*{template.image_suffix}") if p.is_file())
    if not images:
        raise LayoutError(f"no images matching *{template.image_suffix} under {image_dir}")

    supervised = split in ('train', 'val') and domain_tag != 'target'
    if supervised and not label_dir.is_dir():
        raise LayoutError(f"missing label directory for {layout}/{split}: {label_dir}")

    samples: List[Sample] = []
    orphans: List[Path] = []
    for image_path in images:
        relative = image_path.relative_to(image_dir)
        stem = relative.name[:-len(template.image_suffix)]
        label_path = label_dir / relative.parent / f"{stem}{template.label_suffix}"
        if not label_path.is_file():
            label_path = None
            if supervised:
                orphans.append(image_path)
                continue
        samples.append(Sample(image_path=image_path, label_path=label_path, domain_tag=domain_tag))

    if orphans:
        seg_logger.logger.warning(
            f"{len(orphans)} images without labels in {layout}/{split}",
            extra={'event': 'orphan_images', 'details': {'orphans': [str(p) for p in orphans]}}
        )
    if not samples:
        raise LayoutError(f"no usable samples in {root} ({layout}/{split})")

    log_dataset_indexed(str(root), layout, split, len(samples), len(orphans))
    return samples


# ===== LABELS AND IMAGES =====

def encode_labels(raw: np.ndarray, taxonomy: ClassTaxonomy) -> np.ndarray:
    raw = np.asarray(raw)
    encoded = np.full(raw.shape, IGNORE_INDEX, dtype=np.uint8)
    in_range = (raw >= 0) & (raw < 256)
    encoded[in_range] = taxonomy.lookup_table()[raw[in_range].astype(np.intp)]
    return encoded


def is_valid_label_map(label: np.ndarray, num_classes: int = NUM_TRAIN_CLASSES) -> bool:
    label = np.asarray(label)
    return bool(np.all((label < num_classes) | (label == IGNORE_INDEX)))


def read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.array(img.convert('RGB'), dtype=np.uint8)
    except (OSError, ValueError) as e:
        raise RHRSegError(f"cannot read image {path}: {e}") from e


def read_label(path: Path, taxonomy: ClassTaxonomy) -> np.ndarray:
    try:
        with Image.open(path) as img:
            raw = np.array(img)
    except (OSError, ValueError) as e:
        raise RHRSegError(f"cannot read label {path}: {e}") from e
    if raw.ndim != 2:
        raise RHRSegError(f"label {path} must be single-channel, got shape {raw.shape}")
    return encode_labels(raw, taxonomy)


def normalize_image(image: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> torch.Tensor:
    """HxWx3 uint8 pixels -> normalized (3,H,W) float32 tensor"""
    pixels = image.astype(np.float32) / 255.0
    pixels = (pixels - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    return torch.from_numpy(np.ascontiguousarray(pixels.transpose(2, 0, 1)))


def mean_pixel(mean: Sequence[float]) -> np.ndarray:
    """Pad value that normalizes to zero"""
    return np.round(np.asarray(mean) * 255.0).astype(np.uint8)


def pad_to(image: np.ndarray, label: Optional[np.ndarray], height: int, width: int,
           mean: Sequence[float]) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Pad bottom/right up to height x width; no-op when already large enough"""
    pad_h, pad_w = max(height - image.shape[0], 0), max(width - image.shape[1], 0)
    if pad_h == 0 and pad_w == 0:
        return image, label
    padded = np.empty((image.shape[0] + pad_h, image.shape[1] + pad_w, 3), dtype=np.uint8)
    padded[...] = mean_pixel(mean)
    padded[:image.shape[0], :image.shape[1]] = image
    if label is not None:
        padded_label = np.full(padded.shape[:2], IGNORE_INDEX, dtype=np.uint8)
        padded_label[:label.shape[0], :label.shape[1]] = label
        label = padded_label
    return padded, label


def _check_alignment(image: np.ndarray, label: np.ndarray):
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected an HxWx3 image, got shape {image.shape}")
    if image.shape[:2] != label.shape:
        raise AlignmentError(f"image {image.shape[:2]} and label {label.shape} are not aligned")


# ===== AUGMENTATION =====

def augment(image: np.ndarray, label: np.ndarray, cfg: AugConfig,
            rng_state: SeedLike) -> Tuple[torch.Tensor, torch.Tensor]:
    """Random scale, crop (with padding), horizontal flip, then normalization"""
    _check_alignment(image, label)
    rng = np.random.default_rng(rng_state)

    scale = rng.uniform(cfg.scale_range[0], cfg.scale_range[1])
    if scale != 1.0:
        height = max(1, int(round(image.shape[0] * scale)))
        width = max(1, int(round(image.shape[1] * scale)))
        image = np.array(Image.fromarray(image).resize((width, height), Image.BILINEAR))
        label = np.array(Image.fromarray(label).resize((width, height), Image.NEAREST))

    image, label = pad_to(image, label, cfg.crop_height, cfg.crop_width, cfg.normalize_mean)
    top = int(rng.integers(0, image.shape[0] - cfg.crop_height + 1))
    left = int(rng.integers(0, image.shape[1] - cfg.crop_width + 1))
    image = image[top:top + cfg.crop_height, left:left + cfg.crop_width]
    label = label[top:top + cfg.crop_height, left:left + cfg.crop_width]

    if rng.random() < cfg.hflip_probability:
        image = image[:, ::-1]
        label = label[:, ::-1]

    tensor = normalize_image(np.ascontiguousarray(image), cfg.normalize_mean, cfg.normalize_std)
    return tensor, torch.from_numpy(np.ascontiguousarray(label).astype(np.int64))


def center_crop(image: np.ndarray, label: Optional[np.ndarray], crop: Optional[Tuple[int, int]],
                mean: Sequence[float], multiple: int = 32) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Deterministic eval geometry: centre crop to `crop`, or pad up to a multiple of 32"""
    if crop is None:
        height = -(-image.shape[0] // multiple) * multiple
        width = -(-image.shape[1] // multiple) * multiple
        return pad_to(image, label, height, width, mean)
    image, label = pad_to(image, label, crop[0], crop[1], mean)
    top = (image.shape[0] - crop[0]) // 2
    left = (image.shape[1] - crop[1]) // 2
    image = image[top:top + crop[0], left:left + crop[1]]
    if label is not None:
        label = label[top:top + crop[0], left:left + crop[1]]
    return image, label


def sample_seed(seed: int, epoch: int, index: int) -> np.random.SeedSequence:
    """Per-sample augmentation seed independent of worker scheduling"""
    return np.random.SeedSequence([seed, epoch, index])


# ===== TORCH DATASETS =====

class SegmentationDataset(Dataset):
    """Samples decoded, encoded and augmented (train) or centre-cropped (eval)"""

    def __init__(self, samples: Sequence[Sample], taxonomy: ClassTaxonomy, aug: AugConfig,
                 train: bool, seed: int = 0, eval_crop: Optional[Tuple[int, int]] = None):
        self.samples = list(samples)
        self.taxonomy = taxonomy
        self.aug = aug
        self.train = train
        self.seed = seed
        self.eval_crop = eval_crop
        self.epoch = 0

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self):
        return len(self.samples)

    def load(self, index: int) -> Tuple[np.ndarray, np.ndarray]:
        sample = self.samples[index]
        image = read_image(sample.image_path)
        if sample.label_path is not None:
            label = read_label(sample.label_path, self.taxonomy)
        else:
            label = np.full(image.shape[:2], IGNORE_INDEX, dtype=np.uint8)
        return image, label

    def __getitem__(self, index: int) -> Dict[str, torch.Tensor]:
        image, label = self.load(index)
        if self.train:
            tensor, target = augment(image, label, self.aug, sample_seed(self.seed, self.epoch, index))
        else:
            _check_alignment(image, label)
            image, label = center_crop(image, label, self.eval_crop, self.aug.normalize_mean)
            tensor = normalize_image(image, self.aug.normalize_mean, self.aug.normalize_std)
            target = torch.from_numpy(label.astype(np.int64))
        return {'image': tensor, 'label': target, 'index': index}


class EpochSampler(Sampler):
    """Per-epoch permutation derived from (seed, epoch) only"""

    def __init__(self, size: int, seed: int, shuffle: bool = True):
        self.size = size
        self.seed = seed
        self.shuffle = shuffle
        self.epoch = 0

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def order(self) -> List[int]:
        if not self.shuffle:
            return list(range(self.size))
        rng = np.random.default_rng([self.seed, self.epoch])
        return [int(i) for i in rng.permutation(self.size)]

    def __iter__(self):
        return iter(self.order())

    def __len__(self):
        return self.size


# ===== SYNTHETIC SCENES =====

@dataclass(frozen=True)
class SynthShape:
    kind: Literal['rectangle', 'ellipse']
    class_id: int
    top: int
    left: int
    bottom: int
    right: int

    def mask(self, size: int) -> np.ndarray:
        rows, cols = np.mgrid[0:size, 0:size]
        if self.kind == 'rectangle':
            return (rows >= self.top) & (rows < self.bottom) & (cols >= self.left) & (cols < self.right)
        cy, cx = (self.top + self.bottom - 1) / 2.0, (self.left + self.right - 1) / 2.0
        ry, rx = (self.bottom - self.top) / 2.0, (self.right - self.left) / 2.0
        return ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0


@dataclass(frozen=True)
class SynthLamp:
    row: float
    col: float
    radius: float
    strength: float


@dataclass(frozen=True)
class SynthScene:
    size: int
    background: int
    shapes: Tuple[SynthShape, ...]
    lamps: Tuple[SynthLamp, ...] = field(default=())


NIGHT_GAMMA = 2.5
NIGHT_BRIGHTNESS = 0.35
NIGHT_NOISE_SIGMA = 8.0 / 255.0


def _split_code(split: str) -> int:
    return zlib.crc32(split.encode('utf-8'))


def synth_scene(seed: int, split: str, index: int, image_size: int, num_classes: int) -> SynthScene:
    """Scene geometry for one synthetic pair; depends only on its arguments"""
    rng = np.random.default_rng([seed, _split_code(split), index, 0])
    classes = rng.permutation(num_classes)
    num_shapes = min(num_classes - 1, int(rng.integers(1, 4)))
    shapes = []
    for class_id in classes[1:1 + num_shapes]:
        height = int(rng.integers(image_size // 4, image_size // 2 + 1))
        width = int(rng.integers(image_size // 4, image_size // 2 + 1))
        top = int(rng.integers(0, image_size - height + 1))
        left = int(rng.integers(0, image_size - width + 1))
        kind = 'rectangle' if rng.random() < 0.5 else 'ellipse'
        shapes.append(SynthShape(kind, int(class_id), top, left, top + height, left + width))
    lamps = tuple(
        SynthLamp(row=float(rng.uniform(0, image_size)), col=float(rng.uniform(0, image_size)),
                  radius=float(rng.uniform(image_size / 10, image_size / 5)),
                  strength=float(rng.uniform(0.5, 0.85)))
        for _ in range(int(rng.integers(1, 4)))
    )
    return SynthScene(image_size, int(classes[0]), tuple(shapes), lamps)


def render_label(scene: SynthScene) -> np.ndarray:
    label = np.full((scene.size, scene.size), scene.background, dtype=np.uint8)
    for shape in scene.shapes:
        label[shape.mask(scene.size)] = shape.class_id
    return label


def render_image(scene: SynthScene, night: bool, rng: np.random.Generator,
                 taxonomy: ClassTaxonomy = TRAIN_ID_TAXONOMY) -> np.ndarray:
    day = taxonomy.palette()[render_label(scene)].astype(np.float64) / 255.0
    if not night:
        return (day * 255.0).round().astype(np.uint8)

    dark = NIGHT_BRIGHTNESS * day ** NIGHT_GAMMA
    rows, cols = np.mgrid[0:scene.size, 0:scene.size]
    unlit = np.ones((scene.size, scene.size))
    for lamp in scene.lamps:
        distance2 = (rows - lamp.row) ** 2 + (cols - lamp.col) ** 2
        unlit *= 1.0 - lamp.strength * np.exp(-distance2 / (2.0 * lamp.radius ** 2))
    # Lamps pull pixels back towards daylight, never beyond it
    lit = dark + (1.0 - unlit)[..., None] * (day - dark)
    noisy = lit + rng.normal(0.0, NIGHT_NOISE_SIGMA, size=lit.shape)
    return (np.clip(noisy, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def synth_generate(out_root: Path, num_pairs: int, image_size: int, num_classes: int,
                   seed: int, night: bool, split: str = 'train') -> List[Sample]:
    """Write image/label pairs in the synthetic layout"""
    if image_size < 32 or image_size % 32:
        raise ShapeError(f"synthetic image size {image_size} must be a positive multiple of 32")
    if not 2 <= num_classes <= NUM_TRAIN_CLASSES:
        raise InvalidConfig(f"num_classes must be in [2, {NUM_TRAIN_CLASSES}], got {num_classes}")

    template = LAYOUTS['synthetic']
    image_dir = Path(out_root) / template.image_dir.format(split=split)
    label_dir = Path(out_root) / template.label_dir.format(split=split)
    image_dir.mkdir(parents=True, exist_ok=True)
    label_dir.mkdir(parents=True, exist_ok=True)

    samples = []
    for index in range(num_pairs):
        scene = synth_scene(seed, split, index, image_size, num_classes)
        noise_rng = np.random.default_rng([seed, _split_code(split), index, 1])
        image_path = image_dir / f"{index:05d}.png"
        label_path = label_dir / f"{index:05d}.png"
        Image.fromarray(render_image(scene, night, noise_rng), mode='RGB').save(image_path)
        Image.fromarray(render_label(scene), mode='L').save(label_path)
        samples.append(Sample(image_path=image_path, label_path=label_path, domain_tag='synthetic'))

    seg_logger.logger.info(
        f"Generated {num_pairs} synthetic pairs in {image_dir.parent.parent}",
        extra={'event': 'synth_generate',
               'details': {'split': split, 'size': image_size, 'classes': num_classes,
                           'seed': seed, 'night': night}}
    )
    return samples


# ===== PREDICTION EXPORT =====

def colorize_prediction(pred: np.ndarray, taxonomy: ClassTaxonomy) -> np.ndarray:
    """Per-pixel display colors; ignore pixels render black"""
    return taxonomy.palette()[np.asarray(pred, dtype=np.uint8)]


def decolorize(rgb: np.ndarray, taxonomy: ClassTaxonomy) -> np.ndarray:
    """Inverse of colorize_prediction"""
    label = np.full(rgb.shape[:2], IGNORE_INDEX, dtype=np.uint8)
    for train_id, color in enumerate(taxonomy.colors):
        label[np.all(rgb == np.asarray(color, dtype=np.uint8), axis=-1)] = train_id
    return label


def save_prediction(pred: np.ndarray, out_dir: Path, stem: str,
                    taxonomy: ClassTaxonomy) -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pred = np.asarray(pred, dtype=np.uint8)
    trainid_path = out_dir / f"{stem}_trainid.png"
    color_path = out_dir / f"{stem}_color.png"
    Image.fromarray(pred, mode='L').save(trainid_path)
    Image.fromarray(colorize_prediction(pred, taxonomy), mode='RGB').save(color_path)
    return trainid_path, color_path
