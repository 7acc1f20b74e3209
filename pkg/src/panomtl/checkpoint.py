"""Checkpoint container: magic, version, JSON header, raw little-endian fp32 tensors.

Layout::

    b"PMTLCKPT" | uint32 version | uint64 header length | header JSON | tensor bytes

The header holds the network config, free-form metadata and, per tensor,
its name, shape and byte offset into the data section.
"""
import json
import struct

import numpy as np

MAGIC = b"PMTLCKPT"
VERSION = 1


def save_checkpoint(path, config, tensors, meta=None):
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"config": config, "meta": meta or {}, "tensors": entries},
                        sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path):
    """Return ``(config, tensors, meta)``; tensors come back as float32 arrays."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        version, hlen = struct.unpack("<IQ", f.read(12))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(f.read(hlen))
        data = f.read()
    tensors = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return header["config"], tensors, header["meta"]
