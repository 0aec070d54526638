"""Checkpoint serialization tests: layout, checksums, aggregator state."""

import struct

import numpy as np
import pytest

from swaat import checkpoint as ck
from swaat.netcore import make_net
from swaat.swa import EXACT_SMA, WeightAggregator


def _net(seed=0):
    return make_net("cnn-small", (1, 8, 8), 4, dtype=np.float32, seed=seed)


class TestRoundTrip:
    def test_params_and_bn_state(self, tmp_path, rng):
        net = _net(1)
        for _, bn in net.bn_layers():
            bn.running_mean = rng.standard_normal(bn.gamma.size).astype(np.float32)
            bn.running_var = rng.random(bn.gamma.size).astype(np.float32)
        path = str(tmp_path / "a.ckpt")
        ck.save(path, net)
        back, agg = ck.load(path)
        assert agg is None
        assert np.array_equal(back.flatten(), net.flatten())
        for (m0, v0), (m1, v1) in zip(net.bn_state(), back.bn_state()):
            assert np.array_equal(m0, m1) and np.array_equal(v0, v1)

    def test_aggregator_state(self, tmp_path, rng):
        net = _net(2)
        agg = WeightAggregator(7, EXACT_SMA)
        for _ in range(3):
            agg.update(rng.standard_normal(net.num_params()))
        path = str(tmp_path / "b.ckpt")
        ck.save(path, net, agg)
        _, back = ck.load(path)
        assert back.mode == EXACT_SMA
        assert back.window == 7 and back.count == 3
        assert np.array_equal(back.theta_swa, agg.theta_swa)

    def test_float64_net(self, tmp_path):
        net = make_net("mlp-small", (1, 4, 4), 3, seed=5)
        path = str(tmp_path / "c.ckpt")
        ck.save(path, net)
        back, _ = ck.load(path)
        assert np.array_equal(back.flatten(), net.flatten())


class TestIntegrity:
    def test_bad_magic(self):
        with pytest.raises(ck.CheckpointError, match="magic"):
            ck.loads(b"NOPE" + bytes(32))

    def test_checksum_detects_tampering(self, tmp_path):
        blob = bytearray(ck.dumps(_net()))
        blob[40] ^= 0xFF
        with pytest.raises(ck.CheckpointError, match="checksum"):
            ck.loads(bytes(blob))

    def test_unsupported_version(self):
        blob = bytearray(ck.dumps(_net()))
        blob[4:8] = struct.pack("<I", 9)
        body = bytes(blob[:-8])
        fixed = body + struct.pack("<Q", ck._checksum(body))
        with pytest.raises(ck.CheckpointError, match="version"):
            ck.loads(fixed)

    def test_truncated_blob(self):
        blob = ck.dumps(_net())
        body = blob[: len(blob) // 2]
        trunc = body + struct.pack("<Q", ck._checksum(body))
        with pytest.raises(ck.CheckpointError):
            ck.loads(trunc)

    def test_file_checksum_matches_trailer(self, tmp_path):
        path = str(tmp_path / "d.ckpt")
        blob = ck.save(path, _net(3))
        expect = struct.unpack("<Q", blob[-8:])[0]
        assert ck.file_checksum(path) == f"{expect:016x}"

    def test_layout_prefix(self):
        blob = ck.dumps(_net())
        assert blob[:4] == b"SWAT"
        assert struct.unpack("<I", blob[4:8])[0] == ck.VERSION

    def test_deterministic_bytes(self):
        assert ck.dumps(_net(4)) == ck.dumps(_net(4))
