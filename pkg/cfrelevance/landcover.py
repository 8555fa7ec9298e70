#
# 17/10/2026
# cfrelevance: confidence-filtered relevance for naturalness classifiers
#
# Released under GNU GENERAL PUBLIC LICENSE v3. (Use at your own risk)
#

"""
Land-cover rasters and their class manifest.

raster   : width (I) height (I) then one uint16 class id per pixel,
           row-major, little-endian
manifest : utf-8 'id,name' lines, LF terminated
"""

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptionError, FormatError, InputError

raster_header = struct.Struct('<II')


@dataclass(frozen=True)
class LabelRaster:
    classes: np.ndarray  # height x width, uint16
    names: dict = field(default_factory=dict)

    @property
    def height(self):
        return self.classes.shape[0]

    @property
    def width(self):
        return self.classes.shape[1]

    def check_manifest(self):
        missing = sorted(set(np.unique(self.classes).tolist()) - set(self.names))
        if missing:
            raise InputError("class ids %s missing from manifest" % missing)


def encode_raster(classes):
    classes = np.asarray(classes)
    if classes.ndim != 2:
        raise InputError("raster must be 2-d, got shape %s" % (classes.shape,))
    if classes.size and (classes.min() < 0 or classes.max() > 0xFFFF):
        raise InputError("class ids must fit in uint16")
    height, width = classes.shape
    return raster_header.pack(width, height) + np.ascontiguousarray(classes, dtype='<u2').tobytes()


def write_raster(path, classes):
    data = encode_raster(classes)
    with open(path, 'wb') as fd:
        fd.write(data)


def read_raster(path, names=None):
    if not os.path.exists(path):
        raise FileNotFoundError("Can't open %s" % path)
    with open(path, 'rb') as fd:
        data = fd.read()
    if len(data) < raster_header.size:
        raise FormatError("%s: too short for a raster header" % path)
    width, height = raster_header.unpack_from(data, 0)
    if len(data) != raster_header.size + 2 * width * height:
        raise CorruptionError("%s: payload size does not match %dx%d" % (path, width, height))
    classes = np.frombuffer(data, dtype='<u2', offset=raster_header.size).reshape(height, width)
    raster = LabelRaster(classes.astype(np.int64), dict(names or {}))
    if names is not None:
        raster.check_manifest()
    return raster


def write_manifest(path, names):
    with open(path, 'w', encoding='utf-8', newline='\n') as fd:
        for class_id in sorted(names):
            fd.write("%d,%s\n" % (class_id, names[class_id]))


def read_manifest(path):
    if not os.path.exists(path):
        raise FileNotFoundError("Can't open %s" % path)
    names = {}
    with open(path, encoding='utf-8') as fd:
        for number, line in enumerate(fd, 1):
            line = line.rstrip('\n')
            if not line.strip():
                continue
            class_id, sep, name = line.partition(',')
            if not sep or not class_id.strip().isdigit():
                raise FormatError("%s:%d: expected 'id,name'" % (path, number))
            names[int(class_id)] = name
    return names


@dataclass(frozen=True)
class ExternalIndex:
    "per land-cover class scalar, e.g. a human-influence score"
    name: str
    values: dict

    def __post_init__(self):
        if len(self.values) < 2:
            raise InputError("external index '%s' needs at least 2 classes" % self.name)
        if not all(np.isfinite(v) for v in self.values.values()):
            raise InputError("external index '%s' has non-finite values" % self.name)


def read_external_index(path):
    """
    '# name' header line (optional) followed by 'id,value' lines
    """
    if not os.path.exists(path):
        raise FileNotFoundError("Can't open %s" % path)
    name = os.path.splitext(os.path.basename(path))[0]
    values = {}
    with open(path, encoding='utf-8') as fd:
        for number, line in enumerate(fd, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith('#'):
                name = line.lstrip('#').strip() or name
                continue
            try:
                class_id, value = line.split(',')
                values[int(class_id)] = float(value)
            except ValueError:
                raise FormatError("%s:%d: expected 'id,value'" % (path, number))
    return ExternalIndex(name, values)
