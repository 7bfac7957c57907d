"""Binary weights file format.

Layout, all little endian:
  magic    4 bytes  b"FSNW"
  version  uint32
  cfg_len  uint32, followed by cfg_len bytes of UTF-8 JSON (NetworkConfig)
  count    uint32
  then per tensor, in sorted name order:
    name_len uint16, name bytes
    rank     uint8, rank uint32 extents
    float64 payload in C order
"""

import json
import struct

import numpy as np

from .autodiff import Tensor
from .model import NetworkConfig

MAGIC = b"FSNW"
VERSION = 1


class WeightsFormatError(ValueError):
    pass


def save_weights(path, params, config):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        cfg = json.dumps(config.to_json(), sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            data = np.ascontiguousarray(params[name].data, dtype="<f8")
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_weights(path):
    """Returns (params dict of trainable Tensors, NetworkConfig)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise WeightsFormatError("bad magic, not a weights file")
    off = 4
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != VERSION:
        raise WeightsFormatError(f"unsupported weights version {version}")
    (cfg_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    config = NetworkConfig.from_json(json.loads(raw[off : off + cfg_len].decode("utf-8")))
    off += cfg_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        params[name] = Tensor(data.astype(config.dtype), requires_grad=True)
    if off != len(raw):
        raise WeightsFormatError("trailing bytes after last tensor")
    return params, config
