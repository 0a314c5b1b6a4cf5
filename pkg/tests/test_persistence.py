import os
import shutil
import tempfile
import zlib
from unittest import TestCase

import numpy as np
import torch

from forkcast import persistence
from forkcast.config import TrainConfig
from forkcast.errors import (BadMagicError, CheckpointError,
                             CheckpointFormatError, CheckpointShapeError,
                             CheckpointVersionError, ChecksumError,
                             NumericError)
from forkcast.nn_core import ParameterStore

import fixtures


def with_crc(body):
    return body + persistence._U32.pack(zlib.crc32(body) & 0xffffffff)


class CheckpointTestCase(TestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()
        self.path = os.path.join(self.tmp, 'model.mvck')
        self.model = fixtures.small_model(seed=3, dtype=torch.float32)
        self.meta = persistence.model_metadata(self.model, TrainConfig(),
                                               epoch=2)

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def read_bytes(self):
        with open(self.path, 'rb') as fd:
            return fd.read()


class TestRoundTrip(CheckpointTestCase):
    def test_values_are_bit_identical(self):
        persistence.save(self.model.store, self.meta, self.path)
        store, meta = persistence.load(self.path)
        self.assertEqual(store.names(), self.model.store.names())
        for name, value in self.model.store.items():
            self.assertTrue(torch.equal(store[name], value), name)
            self.assertEqual(store.is_trainable(name),
                             self.model.store.is_trainable(name))
        self.assertEqual(meta['epoch'], 2)
        self.assertEqual(meta['model'], self.model.config.to_dict())

    def test_identical_state_identical_bytes(self):
        persistence.save(self.model.store, self.meta, self.path)
        first = self.read_bytes()
        persistence.save(self.model.store.copy(), dict(self.meta), self.path)
        self.assertEqual(self.read_bytes(), first)

    def test_float64_store_is_stored_as_float32(self):
        wide = fixtures.small_model(seed=3)
        persistence.save(wide.store, {}, self.path)
        store, _ = persistence.load(self.path)
        for name, value in wide.store.items():
            self.assertTrue(torch.equal(store[name],
                                        value.detach().to(torch.float32)))

    def test_optimizer_entries_stay_out_of_the_store(self):
        optim = {'optim/encoder/cell/weight/square_avg':
                 np.ones((2, 3), dtype=np.float32)}
        persistence.save(self.model.store, self.meta, self.path, optim)
        ckpt = persistence.load_checkpoint(self.path)
        self.assertEqual(list(ckpt.optimizer), list(optim))
        self.assertNotIn('optim/encoder/cell/weight/square_avg', ckpt.store)
        self.assertEqual(ckpt.optimizer[list(optim)[0]].tolist(),
                         [[1.0] * 3] * 2)

    def test_load_model(self):
        persistence.save(self.model.store, self.meta, self.path)
        model, ckpt = persistence.load_model(self.path)
        self.assertEqual(model.config, self.model.config)
        self.assertEqual(ckpt.metadata['train'], TrainConfig().to_dict())

    def test_no_temporary_files_left(self):
        persistence.save(self.model.store, self.meta, self.path)
        self.assertEqual(os.listdir(self.tmp), ['model.mvck'])


class TestIntegrity(CheckpointTestCase):
    def setUp(self):
        super(TestIntegrity, self).setUp()
        persistence.save(self.model.store, self.meta, self.path)
        self.data = self.read_bytes()

    def test_payload_corruption_reports_crc_offset(self):
        data = bytearray(self.data)
        data[len(data) // 2] ^= 0x10
        with self.assertRaises(ChecksumError) as ctx:
            persistence.decode(bytes(data))
        self.assertEqual(ctx.exception.offset, len(data) - 4)
        self.assertIn('offset %d' % (len(data) - 4), str(ctx.exception))

    def test_fuzzed_corruption_is_always_detected(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            data = bytearray(self.data)
            action = rng.integers(0, 3)
            if action == 0:
                pos = int(rng.integers(0, len(data)))
                data[pos] ^= int(rng.integers(1, 256))
            elif action == 1:
                data = data[:int(rng.integers(0, len(data)))]
            else:
                data += bytes(rng.integers(0, 256, int(rng.integers(1, 9)))
                              .astype(np.uint8).tolist())
            self.assertRaises(CheckpointError, persistence.decode, bytes(data))

    def test_bad_magic(self):
        self.assertRaises(BadMagicError, persistence.decode,
                          b'NOPE' + self.data[4:])

    def test_newer_version(self):
        body = bytearray(self.data[:-4])
        body[4:8] = persistence._U32.pack(2)
        self.assertRaises(CheckpointVersionError, persistence.decode,
                          with_crc(bytes(body)))

    def test_duplicate_entry(self):
        entry = persistence._entry_bytes('w', np.zeros(3))
        body = (persistence.MAGIC + persistence._U32.pack(1) +
                persistence._U32.pack(2) + b'{}' + persistence._U32.pack(2) +
                entry + entry)
        with self.assertRaises(CheckpointFormatError) as ctx:
            persistence.decode(with_crc(body))
        self.assertIn("'w'", str(ctx.exception))

    def test_trailing_bytes_inside_crc(self):
        body = self.data[:-4] + b'\x00\x00'
        self.assertRaises(CheckpointFormatError, persistence.decode,
                          with_crc(body))


class TestRefusals(CheckpointTestCase):
    def test_shape_mismatch(self):
        persistence.save(self.model.store, self.meta, self.path)
        wider = fixtures.small_config(d_enc=4, d_dec=4)
        with self.assertRaises(CheckpointShapeError) as ctx:
            persistence.load_model(self.path, wider)
        self.assertIn('encoder/semantic/weight', str(ctx.exception))

    def test_missing_entry(self):
        bare = fixtures.small_model(use_gat=False, dtype=torch.float32)
        persistence.save(bare.store, {}, self.path)
        store, _ = persistence.load(self.path)
        self.assertRaises(CheckpointShapeError, persistence.check_shapes,
                          store, fixtures.small_config())

    def test_non_finite(self):
        store = ParameterStore()
        store.create('w', (2,))
        with torch.no_grad():
            store['w'][0] = float('inf')
        self.assertRaises(NumericError, persistence.save, store, {},
                          self.path)
        self.assertFalse(os.path.exists(self.path))

    def test_non_finite_history(self):
        self.assertRaises(NumericError, persistence.model_metadata,
                          self.model, history=[(1.0, float('nan'), 0.0, 1.0)])

    def test_unwritable_directory(self):
        path = os.path.join(self.tmp, 'missing', 'model.mvck')
        self.assertRaises(CheckpointError, persistence.save,
                          self.model.store, {}, path)

    def test_missing_file(self):
        self.assertRaises(CheckpointError, persistence.load,
                          os.path.join(self.tmp, 'nothing.mvck'))
