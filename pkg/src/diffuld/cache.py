"""On-disk feature cache.

File layout (little-endian):

    offset  size  field
    0       4     magic b"DULF"
    4       2     format version (1)
    6       2     dtype code (1 = float32, 2 = float64)
    8       4     H
    12      4     W
    16      4     D
    20      8     seed (signed)
    28      4     provenance length in bytes (P)
    32      P     provenance, UTF-8
    32+P    ...   H*W*D values, row-major (H, W, D)
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .backbone import FeatureMap

MAGIC = b"DULF"
VERSION = 1
HEADER = struct.Struct("<4sHHIIIqI")
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class FeatureCacheError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def cache_features(fmap: FeatureMap, path, seed: int = 0) -> None:
    grid = np.asarray(fmap.grid)
    code = CODES.get(grid.dtype)
    if code is None:
        grid = grid.astype(np.float64)
        code = 2
    prov = fmap.provenance.encode("utf-8")
    h, w, d = grid.shape
    header = HEADER.pack(MAGIC, VERSION, code, h, w, d, int(seed), len(prov))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(prov)
        fh.write(np.ascontiguousarray(grid, dtype=DTYPES[code]).tobytes())
    os.replace(tmp, path)


def load_features(path) -> FeatureMap:
    fmap, _ = load_features_with_seed(path)
    return fmap


def load_features_with_seed(path) -> tuple[FeatureMap, int]:
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise FeatureCacheError(f"truncated header: {len(data)} of {HEADER.size} bytes", len(data))
    magic, version, code, h, w, d, seed, plen = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FeatureCacheError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FeatureCacheError(f"unsupported version {version}", 4)
    if code not in DTYPES:
        raise FeatureCacheError(f"unknown dtype code {code}", 6)
    if h == 0 or w == 0:
        raise FeatureCacheError("zero-sized grid", 8)
    start = HEADER.size + plen
    if len(data) < start:
        raise FeatureCacheError("truncated provenance", len(data))
    try:
        prov = data[HEADER.size:start].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FeatureCacheError("provenance is not UTF-8", HEADER.size + exc.start) from exc
    dtype = DTYPES[code]
    expected = h * w * d * dtype.itemsize
    if len(data) - start != expected:
        raise FeatureCacheError(
            f"payload is {len(data) - start} bytes, header declares {expected}", start)
    grid = np.frombuffer(data, dtype=dtype, count=h * w * d, offset=start).reshape(h, w, d)
    return FeatureMap(grid.astype(dtype.newbyteorder("=")), provenance=prov), seed
