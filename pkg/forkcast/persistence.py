"""MVCK checkpoint files.

Layout (all integers unsigned 32-bit little-endian, no padding)::

    b"MVCK" | version | meta_len | meta (UTF-8 JSON) | count |
    count * (name_len | name | rank | rank * dim | float32 data) | crc32

The CRC covers every byte before it. Metadata is canonical JSON (sorted
keys, compact separators) so identical state always produces identical
files.
"""
import json
import logging
import math
import os
import struct
import tempfile
import zlib
from collections import OrderedDict, namedtuple

import numpy as np
import torch

from forkcast import log
from forkcast.config import ModelConfig
from forkcast.errors import (BadMagicError, CheckpointError,
                             CheckpointFormatError, CheckpointShapeError,
                             CheckpointVersionError, ChecksumError,
                             NumericError)
from forkcast.nn_core import ParameterStore

logger = logging.getLogger(__name__)

MAGIC = b'MVCK'
VERSION = 1
OPTIM_PREFIX = 'optim/'
_U32 = struct.Struct('<I')

Checkpoint = namedtuple('Checkpoint', 'store metadata optimizer')


def _canonical_json(data):
    return json.dumps(data, sort_keys=True, separators=(',', ':'),
                      allow_nan=False).encode('utf-8')


def _entry_bytes(name, array):
    array = np.asarray(array, dtype='<f4')
    encoded = name.encode('utf-8')
    parts = [_U32.pack(len(encoded)), encoded, _U32.pack(array.ndim)]
    parts.extend(_U32.pack(d) for d in array.shape)
    parts.append(array.tobytes(order='C'))
    return b''.join(parts)


def encode(store, metadata, optimizer=None):
    """Serializes a ParameterStore plus optional optimizer arrays."""
    entries = OrderedDict(store.to_arrays())
    for name in sorted(optimizer or {}):
        entries[name] = optimizer[name]
    for name, value in entries.items():
        if not np.all(np.isfinite(value)):
            raise NumericError('refusing to save non-finite entry %s' % name)
    metadata = dict(metadata or {})
    metadata['trainable'] = [n for n, _ in store.trainable()]
    metadata['seed'] = metadata.get('seed', store.seed)
    try:
        meta = _canonical_json(metadata)
    except ValueError as exc:
        raise NumericError('metadata is not finite JSON: %s' % exc)
    body = [MAGIC, _U32.pack(VERSION), _U32.pack(len(meta)), meta,
            _U32.pack(len(entries))]
    body.extend(_entry_bytes(n, v) for n, v in entries.items())
    data = b''.join(body)
    return data + _U32.pack(zlib.crc32(data) & 0xffffffff)


def save(store, metadata, path, optimizer=None):
    """Writes a checkpoint atomically (temp file in the same directory,
    then rename)."""
    data = encode(store, metadata, optimizer)
    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(dir=directory, prefix='.tmp-',
                                   suffix='.mvck')
        try:
            with os.fdopen(fd, 'wb') as out:
                out.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except (IOError, OSError) as exc:
        raise CheckpointError('cannot write checkpoint %s: %s' % (path, exc))
    logger.info(log.kv(saved=path, entries=len(store), bytes=len(data)))


class _Reader(object):

    def __init__(self, data, end):
        self.data = data
        self.end = end
        self.pos = 0

    def take(self, n, what):
        if n < 0 or self.pos + n > self.end:
            raise CheckpointFormatError(
                'truncated %s at offset %d (need %d bytes, %d left)' %
                (what, self.pos, n, self.end - self.pos))
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return _U32.unpack(self.take(4, what))[0]


def decode(data):
    """Parses checkpoint bytes into a Checkpoint.

    Checks run in order: magic, version, CRC, then structure. Nothing is
    returned until every check passed.
    """
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError('not an MVCK checkpoint (magic %r)' % data[:4])
    if len(data) < 8:
        raise CheckpointFormatError('truncated header')
    version = _U32.unpack(data[4:8])[0]
    if version > VERSION or version < 1:
        raise CheckpointVersionError('unsupported checkpoint version %d '
                                     '(supported: %d)' % (version, VERSION))
    if len(data) < 16:
        raise CheckpointFormatError('truncated checkpoint (%d bytes)' %
                                    len(data))
    end = len(data) - 4
    stored = _U32.unpack(data[end:])[0]
    computed = zlib.crc32(data[:end]) & 0xffffffff
    if stored != computed:
        raise ChecksumError(stored, computed, end, end)
    reader = _Reader(data, end)
    reader.pos = 8
    meta_len = reader.u32('metadata length')
    try:
        metadata = json.loads(reader.take(meta_len, 'metadata').decode('utf-8'))
    except ValueError as exc:
        raise CheckpointFormatError('bad metadata: %s' % exc)
    if not isinstance(metadata, dict):
        raise CheckpointFormatError('metadata must be a JSON object')
    count = reader.u32('entry count')
    entries = OrderedDict()
    for _ in range(count):
        offset = reader.pos
        name_len = reader.u32('name length')
        try:
            name = reader.take(name_len, 'entry name').decode('utf-8')
        except UnicodeDecodeError:
            raise CheckpointFormatError('entry name at offset %d is not '
                                        'UTF-8' % offset)
        if name in entries:
            raise CheckpointFormatError('duplicate entry %r' % name)
        rank = reader.u32('rank of %s' % name)
        dims = tuple(reader.u32('dims of %s' % name) for _ in range(rank))
        size = int(np.prod(dims, dtype=np.int64)) if dims else 1
        raw = reader.take(4 * size, 'data of %s' % name)
        array = np.frombuffer(raw, dtype='<f4').reshape(dims).copy()
        if not np.all(np.isfinite(array)):
            raise CheckpointFormatError('entry %r has non-finite values' %
                                        name)
        entries[name] = array
    if reader.pos != end:
        raise CheckpointFormatError('%d unexpected bytes after the last '
                                    'entry' % (end - reader.pos))
    trainable = set(metadata.get('trainable', ()))
    store = ParameterStore(int(metadata.get('seed', 0)), torch.float32)
    optimizer = OrderedDict()
    for name, array in entries.items():
        if name.startswith(OPTIM_PREFIX):
            optimizer[name] = array
            continue
        store.create(name, array.shape or (1,), init='zeros',
                     trainable=name in trainable)
        store.set_array(name, array.reshape(store[name].shape))
    return Checkpoint(store, metadata, optimizer)


def load_checkpoint(path):
    try:
        with open(path, 'rb') as fd:
            data = fd.read()
    except (IOError, OSError) as exc:
        raise CheckpointError('cannot read checkpoint %s: %s' % (path, exc))
    return decode(data)


def load(path):
    """Returns (ParameterStore, metadata)."""
    ckpt = load_checkpoint(path)
    return ckpt.store, ckpt.metadata


def check_shapes(store, model_config):
    """Raises CheckpointShapeError at the first entry that disagrees with
    what ``model_config`` builds."""
    from forkcast.model import build_parameters
    expected = build_parameters(model_config, ParameterStore()).shapes()
    got = store.shapes()
    for name, shape in expected.items():
        if name not in got:
            raise CheckpointShapeError('checkpoint lacks entry %s %s' %
                                       (name, shape))
        if got[name] != shape:
            raise CheckpointShapeError(
                'entry %s: model expects shape %s, checkpoint has %s' %
                (name, shape, got[name]))
    extra = [n for n in got if n not in expected]
    if extra:
        raise CheckpointShapeError('checkpoint has unexpected entry %s' %
                                   extra[0])


def model_metadata(model, train_config=None, history=(), epoch=0,
                   optimizer_steps=None, tail=5):
    """Metadata block written next to a model's parameters."""
    meta = {'model': model.config.to_dict(),
            'seed': model.store.seed,
            'epoch': int(epoch),
            'loss_tail': [list(map(float, h)) for h in list(history)[-tail:]]}
    if train_config is not None:
        meta['train'] = train_config.to_dict()
    if optimizer_steps:
        meta['optimizer_steps'] = dict(optimizer_steps)
    for row in meta['loss_tail']:
        if not all(math.isfinite(v) for v in row):
            raise NumericError('refusing to save a non-finite loss history')
    return meta


def load_model(path, model_config=None):
    """Loads a Model; ``model_config`` overrides the stored configuration
    and must match every stored shape."""
    from forkcast.model import Model
    ckpt = load_checkpoint(path)
    if model_config is None:
        model_config = ModelConfig.from_dict(ckpt.metadata.get('model'),
                                             prefix='model')
    check_shapes(ckpt.store, model_config)
    return Model(model_config, ckpt.store), ckpt
