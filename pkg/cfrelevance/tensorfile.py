#
# 17/10/2026
# cfrelevance: confidence-filtered relevance for naturalness classifiers
#
# Released under GNU GENERAL PUBLIC LICENSE v3. (Use at your own risk)
#

"""
CFRT tensor container. Everything little-endian:

    header  : magic 'CFRT' (4s) version (B) entry count (I)
    entry   : name length (H) name (utf-8) ndim (B) dims (I each)
              payload float32 x product(dims), row-major

A single 1-element 1-d tensor named 'x' therefore has its payload at
byte offset 9 + 2 + 1 + 1 + 4 = 17.
"""

import logging
import os
import struct

import numpy as np

from .errors import CorruptionError, FormatError, InputError

logger = logging.getLogger(__name__)

MAGIC = b'CFRT'
VERSION = 1

header_format = struct.Struct('<4sBI')
name_length_format = struct.Struct('<H')
ndim_format = struct.Struct('<B')


def _entries(tensors):
    if hasattr(tensors, 'items'):
        tensors = list(tensors.items())
    seen = set()
    entries = []
    for name, value in tensors:
        if name in seen:
            raise InputError("duplicate tensor name '%s'" % name)
        seen.add(name)
        raw = name.encode('utf-8')
        if len(raw) > 0xFFFF:
            raise InputError("tensor name too long: '%s...'" % name[:32])
        array = np.asarray(value, dtype=np.float64)
        if array.ndim > 0xFF:
            raise InputError("tensor '%s' has too many dims" % name)
        entries.append((raw, array))
    return entries


def encode_tensors(tensors):
    "the full file image as bytes; raises before anything is written"
    entries = _entries(tensors)
    chunks = [header_format.pack(MAGIC, VERSION, len(entries))]
    for raw, array in entries:
        chunks.append(name_length_format.pack(len(raw)))
        chunks.append(raw)
        chunks.append(ndim_format.pack(array.ndim))
        chunks.append(struct.pack('<%dI' % array.ndim, *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype='<f4').tobytes())
    return b''.join(chunks)


def write_tensors(path, tensors):
    data = encode_tensors(tensors)
    with open(path, 'wb') as fd:
        fd.write(data)
    logger.debug("wrote %s (%d bytes)", path, len(data))


def decode_tensors(data, source='<bytes>', verbose=0):
    if len(data) < header_format.size:
        raise FormatError("%s: too short for a CFRT header" % source)
    magic, version, count = header_format.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError("%s: bad magic %r" % (source, magic))
    if version != VERSION:
        raise FormatError("%s: unsupported version %d" % (source, version))

    offset = header_format.size
    tensors = {}
    for index in range(count):
        label = 'entry #%d' % index
        try:
            length, = name_length_format.unpack_from(data, offset)
            offset += name_length_format.size
            name = data[offset:offset + length].decode('utf-8')
            if len(name.encode('utf-8')) != length:
                raise struct.error("short name")
            label = "entry '%s'" % name
            offset += length
            ndim, = ndim_format.unpack_from(data, offset)
            offset += ndim_format.size
            dims = struct.unpack_from('<%dI' % ndim, data, offset)
            offset += 4 * ndim
        except (struct.error, UnicodeDecodeError):
            raise CorruptionError("%s: truncated header of %s" % (source, label))

        count_values = int(np.prod(dims, dtype=np.int64))
        end = offset + 4 * count_values
        if end > len(data):
            raise CorruptionError("%s: truncated payload of %s" % (source, label))
        if name in tensors:
            raise CorruptionError("%s: duplicate %s" % (source, label))
        values = np.frombuffer(data, dtype='<f4', count=count_values, offset=offset)
        tensors[name] = values.astype(np.float64).reshape(dims)
        offset = end
        if verbose >= 3:
            logger.debug("%s %s", name, dims)

    if offset != len(data):
        raise CorruptionError("%s: %d trailing bytes" % (source, len(data) - offset))
    return tensors


def read_tensors(path, verbose=0):
    if not os.path.exists(path):
        raise FileNotFoundError("Can't open %s" % path)
    with open(path, 'rb') as fd:
        data = fd.read()
    return decode_tensors(data, source=path, verbose=verbose)
