"""Portable named-tensor archive ("YFTA") and seeded parameter initialization.

File layout, all little-endian:
    magic "YFTA" (4 bytes) | format version u32 | index length u64 |
    index JSON (UTF-8)     | tensor payloads, each raw f32, 64-byte aligned

The index JSON carries ``metadata`` (string->string) and a ``tensors`` list
of {name, dtype, shape, offset, length} with offsets absolute from the file
start. Reserved metadata keys: config_hash, anchors, bn_eps, score_mode.
"""
import json
import math

import numpy as np

from .errors import (
    ArchiveError,
    BadMagicError,
    OverlappingTensorsError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)

MAGIC = b"YFTA"
VERSION = 1
ALIGN = 64
_HEADER = len(MAGIC) + 4 + 8
RNG_NAME = "numpy-pcg64"  # frozen in metadata: archives are per-artifact deterministic


class TensorArchive:
    """Named float32 tensors plus a string->string metadata map."""

    def __init__(self, tensors=None, metadata=None):
        self.tensors = {}
        self.metadata = {str(k): str(v) for k, v in (metadata or {}).items()}
        for name, arr in (tensors or {}).items():
            self.add(name, arr)

    def add(self, name, arr):
        if name in self.tensors:
            raise ArchiveError(f"duplicate tensor name {name!r}")
        self.tensors[name] = np.ascontiguousarray(np.asarray(arr, dtype=np.float32))

    def __contains__(self, name):
        return name in self.tensors

    def __getitem__(self, name):
        return self.tensors[name]

    def __len__(self):
        return len(self.tensors)

    def names(self):
        return list(self.tensors)


def _align(offset):
    return (offset + ALIGN - 1) // ALIGN * ALIGN


def save(archive):
    """Serialize an archive to bytes (see module docstring for layout)."""
    entries = []
    for name, arr in archive.tensors.items():
        entries.append({
            "name": name,
            "dtype": "f32",
            "shape": list(arr.shape),
            "offset": 0,
            "length": arr.size * 4,
        })

    # Offsets appear inside the index, whose length feeds back into the
    # offsets; iterate to the fixed point (converges in a couple of rounds).
    index_len = 0
    for _ in range(8):
        base = _align(_HEADER + index_len)
        off = base
        for e in entries:
            e["offset"] = off
            off = _align(off + e["length"])
        blob = json.dumps({"metadata": archive.metadata, "tensors": entries},
                          sort_keys=True).encode("utf-8")
        if len(blob) == index_len:
            break
        index_len = len(blob)
    else:
        raise ArchiveError("index layout failed to converge")

    total = entries[-1]["offset"] + entries[-1]["length"] if entries else _HEADER + index_len
    buf = bytearray(max(total, _HEADER + index_len))
    buf[:4] = MAGIC
    buf[4:8] = VERSION.to_bytes(4, "little")
    buf[8:16] = index_len.to_bytes(8, "little")
    buf[16:16 + index_len] = blob
    for e, arr in zip(entries, archive.tensors.values()):
        raw = arr.astype("<f4", copy=False).tobytes()
        buf[e["offset"]: e["offset"] + e["length"]] = raw
    return bytes(buf)


def load(data):
    """Parse archive bytes; malformed input raises a specific ArchiveError."""
    if len(data) < _HEADER or data[:4] != MAGIC:
        raise BadMagicError(f"not a {MAGIC.decode()} archive")
    version = int.from_bytes(data[4:8], "little")
    if version != VERSION:
        raise UnsupportedVersionError(f"format version {version}, this build reads {VERSION}")
    index_len = int.from_bytes(data[8:16], "little")
    if _HEADER + index_len > len(data):
        raise TruncatedPayloadError("index extends past end of file")
    try:
        index = json.loads(data[16:16 + index_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"malformed index JSON: {exc}") from None

    metadata = index.get("metadata", {})
    if not isinstance(metadata, dict):
        raise ArchiveError("metadata must be a string map")
    archive = TensorArchive(metadata=metadata)
    extents = []
    for entry in index.get("tensors", []):
        name = entry["name"]
        if entry.get("dtype") != "f32":
            raise ArchiveError(f"tensor {name!r}: unsupported dtype {entry.get('dtype')!r}")
        shape = tuple(int(v) for v in entry["shape"])
        offset, length = int(entry["offset"]), int(entry["length"])
        if length != 4 * int(np.prod(shape, dtype=np.int64)):
            raise ArchiveError(f"tensor {name!r}: length {length} != 4*prod{shape}")
        if offset < 0 or offset + length > len(data):
            raise TruncatedPayloadError(
                f"tensor {name!r}: extent [{offset}, {offset + length}) past file end {len(data)}")
        extents.append((offset, offset + length, name))
        arr = np.frombuffer(data, dtype="<f4", count=length // 4, offset=offset)
        archive.add(name, arr.reshape(shape))
    extents.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(extents, extents[1:]):
        if s1 < e0:
            raise OverlappingTensorsError(f"tensors {n0!r} and {n1!r} overlap")
    return archive


def save_file(archive, path):
    with open(path, "wb") as fh:
        fh.write(save(archive))


def load_file(path):
    with open(path, "rb") as fh:
        return load(fh.read())


def seeded_arrays(specs, seed):
    """Deterministic weights for an ordered ParamSpec iterable.

    Conv kernels are uniform with variance 1/fan_in (bound sqrt(3/fan_in));
    biases zero; BN starts as the identity transform.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    out = {}
    for spec in specs:
        shape = tuple(spec.shape)
        if spec.kind == "weight":
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(3.0 / fan_in)
            arr = (rng.random(shape, dtype=np.float32) * 2.0 - 1.0) * np.float32(bound)
        elif spec.kind in ("bias", "bn_beta", "bn_mean"):
            arr = np.zeros(shape, dtype=np.float32)
        elif spec.kind in ("bn_gamma", "bn_var"):
            arr = np.ones(shape, dtype=np.float32)
        else:
            raise ArchiveError(f"unknown parameter kind {spec.kind!r}")
        out[spec.name] = arr
    return out


def seeded_init(config, seed=0):
    """Archive of deterministic pseudo-random weights for ``config``."""
    from .model import Model  # deferred: model builds on this module too

    model = Model(config)
    arrays = seeded_arrays(model.param_specs(), seed)
    metadata = {
        "config_hash": config.config_hash(),
        "anchors": json.dumps(config.anchor_sizes()),
        "bn_eps": repr(model.eps),
        "score_mode": "conf",
        "rng": RNG_NAME,
        "seed": str(seed),
    }
    return TensorArchive(arrays, metadata)
