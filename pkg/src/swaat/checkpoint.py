"""Checkpoint serialization.

Layout (little-endian):
    magic "SWAT"
    u32   format version (currently 1)
    u32   descriptor length, then that many bytes of UTF-8 text
    f64[P]            trainable parameters (canonical flatten order)
    f64[...]          BN running stats in layer order (mean then var per layer)
    f64[P] (optional) aggregated weight vector, present only when the
                      descriptor carries swa_mode/swa_count fields
    u64   checksum of all prior bytes (first 8 bytes of their SHA-256)

The descriptor is the network's textual architecture descriptor, optionally
extended with ";swa_mode=<mode>;swa_window=<n>;swa_count=<n>" to persist
aggregator state. The snapshot ring of an exact-SMA aggregator is not stored;
on resume it restarts in its cumulative phase from the stored mean.
"""

import hashlib
import struct

import numpy as np

from .netcore import Network, net_from_descriptor
from .swa import WeightAggregator

MAGIC = b"SWAT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _checksum(data):
    return int.from_bytes(hashlib.sha256(data).digest()[:8], "little")


def dumps(net, agg=None):
    desc = net.descriptor
    if agg is not None:
        desc += f";swa_mode={agg.mode};swa_window={agg.window};swa_count={agg.count}"
    desc_b = desc.encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION),
             struct.pack("<I", len(desc_b)), desc_b,
             net.flatten().astype("<f8").tobytes()]
    for mean, var in net.bn_state():
        parts.append(np.asarray(mean, dtype="<f8").tobytes())
        parts.append(np.asarray(var, dtype="<f8").tobytes())
    if agg is not None:
        parts.append(np.asarray(agg.theta_swa, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", _checksum(body))


def save(path, net, agg=None):
    blob = dumps(net, agg)
    with open(path, "wb") as f:
        f.write(blob)
    return blob


def loads(blob):
    """Returns (net, aggregator-or-None)."""
    if len(blob) < 20 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, (stored,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if _checksum(body) != stored:
        raise CheckpointError("checkpoint checksum mismatch")
    version, = struct.unpack("<I", blob[4:8])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    dlen, = struct.unpack("<I", blob[8:12])
    desc = blob[12:12 + dlen].decode("utf-8")
    pos = 12 + dlen

    fields = dict(p.split("=", 1) for p in desc.split(";")[1:] if "=" in p)
    net = net_from_descriptor(desc)
    p_count = net.num_params()

    def take(count):
        nonlocal pos
        raw = blob[pos:pos + 8 * count]
        if len(raw) != 8 * count:
            raise CheckpointError("truncated checkpoint")
        pos += 8 * count
        return np.frombuffer(raw, dtype="<f8")

    net.unflatten(take(p_count))
    state = []
    for _, bn in net.bn_layers():
        k = bn.gamma.size
        state.append((take(k), take(k)))
    net.set_bn_state(state)

    agg = None
    if "swa_mode" in fields:
        theta = take(p_count)
        agg = WeightAggregator(int(fields["swa_window"]), fields["swa_mode"],
                               theta=theta, count=int(fields["swa_count"]))
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return net, agg


def load(path):
    with open(path, "rb") as f:
        return loads(f.read())


def file_checksum(path):
    """Checksum recorded at the end of a checkpoint file, as hex."""
    with open(path, "rb") as f:
        blob = f.read()
    return f"{struct.unpack('<Q', blob[-8:])[0]:016x}"
