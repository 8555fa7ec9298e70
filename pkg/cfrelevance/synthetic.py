#
# 17/10/2026
# cfrelevance: confidence-filtered relevance for naturalness classifiers
#
# Released under GNU GENERAL PUBLIC LICENSE v3. (Use at your own risk)
#

"""
Seeded 'planted-texture' dataset.

Every image is a Voronoi mosaic of land-cover regions, each region filled
with its class colour. Natural images (label 1) carry a checkerboard
texture on the pixels of the planted class; non-natural images (label 0)
carry a regular grid artifact on one other class. Gaussian pixel noise is
added last and the result clipped to [0, 1]. A seeded share of the images
is faint: their texture or grid is drawn at a reduced amplitude, which
makes them the ambiguous cases of the set.

All randomness comes from numpy's Philox-4x64 counter-based generator keyed
with (seed, stream); the stream ids below are part of the format.
"""

import logging
import os
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import InputError
from .landcover import read_manifest, read_raster, write_manifest, write_raster
from .tensorfile import read_tensors, write_tensors

logger = logging.getLogger(__name__)

NATURAL = 1
NON_NATURAL = 0

STREAM_PALETTE = 1
STREAM_LABELS = 2
STREAM_SPLIT = 3
STREAM_INIT = 4
STREAM_BATCHES = 5
STREAM_MOSAIC = 1 << 20
STREAM_NOISE = 1 << 21
STREAM_FAINT = 1 << 22

GRID_PERIOD = 4
SITES_PER_CLASS = 2

DEFAULT_CLASS_NAMES = ['forest', 'shrubland', 'wetland', 'urban', 'cropland',
                       'water', 'bare_rock', 'grassland']

DATASET_FILE = 'dataset.cfrt'
MANIFEST_FILE = 'landcover.manifest'
RASTER_DIR = 'rasters'


def philox(seed, stream):
    "independent generator for one (seed, stream) pair"
    key = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class SyntheticSpec:
    num_images: int = 64
    image_size: int = 32
    num_land_classes: int = 4
    planted_class_id: int = 1
    texture_amplitude: float = 0.25
    noise_sigma: float = 0.05
    seed: int = 0
    channels: int = 3
    faint_fraction: float = 0.25
    faint_strength: float = 0.5

    def validate(self):
        if self.num_images < 1 or self.image_size < 1 or self.channels < 1:
            raise InputError("num_images, image_size and channels must be positive")
        if self.num_land_classes < 2:
            raise InputError("need at least 2 land-cover classes")
        if not 0 <= self.planted_class_id < self.num_land_classes:
            raise InputError("planted_class_id %d out of range" % self.planted_class_id)
        if not 0 <= self.faint_fraction <= 1 or not 0 <= self.faint_strength <= 1:
            raise InputError("faint_fraction and faint_strength must lie in [0, 1]")
        if self.texture_amplitude < 0 or self.noise_sigma < 0:
            raise InputError("texture_amplitude and noise_sigma must be >= 0")

    def class_names(self):
        return {c: DEFAULT_CLASS_NAMES[c] if c < len(DEFAULT_CLASS_NAMES) else 'class_%d' % c
                for c in range(self.num_land_classes)}


@dataclass
class Dataset:
    images: np.ndarray   # N x C x S x S
    labels: np.ndarray   # N, int
    rasters: np.ndarray  # N x S x S, int
    names: dict
    splits: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)


def palette(spec):
    return philox(spec.seed, STREAM_PALETTE).uniform(0.25, 0.75, size=(spec.num_land_classes, spec.channels))


def mosaic(spec, index):
    """
    label raster of image `index` plus the class that receives the grid
    artifact if the image is non-natural
    """
    rng = philox(spec.seed, STREAM_MOSAIC + index)
    k = spec.num_land_classes
    size = spec.image_size
    sites = rng.uniform(0, size, size=(SITES_PER_CLASS * k, 2))
    site_class = np.concatenate([np.arange(k), rng.integers(0, k, size=(SITES_PER_CLASS - 1) * k)])
    others = [c for c in range(k) if c != spec.planted_class_id]
    grid_class = others[int(rng.integers(0, len(others)))]

    centers = np.arange(size) + 0.5
    yy, xx = np.meshgrid(centers, centers, indexing='ij')
    d2 = (yy[..., None] - sites[:, 0]) ** 2 + (xx[..., None] - sites[:, 1]) ** 2
    raster = site_class[np.argmin(d2, axis=-1)]
    return raster.astype(np.int64), grid_class


def texture_strength(spec, index):
    "1, or faint_strength for the faint_fraction of images drawn as faint"
    faint = philox(spec.seed, STREAM_FAINT + index).uniform() < spec.faint_fraction
    return spec.faint_strength if faint else 1.0


def render_sample(spec, index, label, colours=None):
    "(image C x S x S, raster S x S) for one index and an explicit label"
    if colours is None:
        colours = palette(spec)
    raster, grid_class = mosaic(spec, index)
    image = np.transpose(colours[raster], (2, 0, 1)).copy()

    size = spec.image_size
    amplitude = spec.texture_amplitude * texture_strength(spec, index)
    yy, xx = np.mgrid[0:size, 0:size]
    if label == NATURAL:
        pattern = np.where((yy + xx) % 2 == 0, 1.0, -1.0) * amplitude
        mask = raster == spec.planted_class_id
    else:
        pattern = np.where((yy % GRID_PERIOD == 0) | (xx % GRID_PERIOD == 0), amplitude, 0.0)
        mask = raster == grid_class
    image += np.where(mask, pattern, 0.0)[None]

    if spec.noise_sigma > 0:
        image += philox(spec.seed, STREAM_NOISE + index).normal(0.0, spec.noise_sigma, size=image.shape)
    return np.clip(image, 0.0, 1.0), raster


def generate_synthetic(spec):
    spec.validate()
    colours = palette(spec)
    labels = philox(spec.seed, STREAM_LABELS).permutation(np.arange(spec.num_images) % 2)
    images = np.empty((spec.num_images, spec.channels, spec.image_size, spec.image_size))
    rasters = np.empty((spec.num_images, spec.image_size, spec.image_size), dtype=np.int64)
    for i in range(spec.num_images):
        images[i], rasters[i] = render_sample(spec, i, labels[i], colours)
    # float32 on disk; keep memory and disk bit-identical
    images = images.astype(np.float32).astype(np.float64)
    logger.info("generated %d synthetic images (%d natural)", spec.num_images, int(labels.sum()))
    return Dataset(images, labels.astype(np.int64), rasters, spec.class_names())


def split_sizes(n, fractions):
    "largest-remainder rounding; ties go to the earlier split"
    exact = [Fraction(f).limit_denominator(10 ** 9) * n for f in fractions]
    sizes = [int(e) for e in exact]
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[:n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split(n, fractions=(0.8, 0.1, 0.1), seed=0):
    """
    disjoint train/val/test index sets covering range(n)
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise InputError("need three positive fractions, got %s" % (fractions,))
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise InputError("fractions must sum to 1, got %r" % sum(fractions))
    sizes = split_sizes(n, fractions)
    if n > 0 and min(sizes) == 0:
        raise InputError("split %s of %d samples leaves an empty set" % (fractions, n))

    order = philox(seed, STREAM_SPLIT).permutation(n)
    train = np.sort(order[:sizes[0]])
    val = np.sort(order[sizes[0]:sizes[0] + sizes[1]])
    test = np.sort(order[sizes[0] + sizes[1]:])
    return {'train': train, 'val': val, 'test': test}


def save_dataset(directory, dataset):
    os.makedirs(os.path.join(directory, RASTER_DIR), exist_ok=True)
    tensors = {'images': dataset.images, 'labels': dataset.labels}
    for name, indices in dataset.splits.items():
        tensors['split/' + name] = indices
    write_tensors(os.path.join(directory, DATASET_FILE), tensors)
    write_manifest(os.path.join(directory, MANIFEST_FILE), dataset.names)
    for i, raster in enumerate(dataset.rasters):
        write_raster(os.path.join(directory, RASTER_DIR, '%05d.lcr' % i), raster)


def load_dataset(directory, verbose=0):
    tensors = read_tensors(os.path.join(directory, DATASET_FILE), verbose)
    names = read_manifest(os.path.join(directory, MANIFEST_FILE))
    labels = tensors['labels'].astype(np.int64)
    rasters = np.stack([read_raster(os.path.join(directory, RASTER_DIR, '%05d.lcr' % i), names).classes
                        for i in range(len(labels))])
    splits = {key[len('split/'):]: value.astype(np.int64)
              for key, value in tensors.items() if key.startswith('split/')}
    return Dataset(tensors['images'], labels, rasters, names, splits)
