"""Named-array binary container.

Every binary artifact in this package (corpus utterances, GMM-HMM models,
checkpoints) is a single file holding a set of named numpy arrays plus an
optional JSON metadata dict.  The layout is little-endian throughout:

    offset  size  field
    0       4     magic b"NARC"
    4       4     format version (u32), currently 1
    8       4     number of entries (u32)
    12      ...   entry table, one record per array:
                      u16   name length in bytes
                      ...   name (utf-8)
                      u8    dtype code (see DTYPE_CODES)
                      u8    ndim
                      ndim x u64   shape
                      u64   payload size in bytes
    ...     ...   payloads, C-contiguous little-endian, in table order

Metadata travels as a reserved entry named "__meta__" (uint8 array holding
UTF-8 JSON), so run provenance such as the experiment config hash is embedded
in the file itself rather than in a sidecar.
"""

import json
import struct

import numpy as np

MAGIC = b"NARC"
VERSION = 1
META_KEY = "__meta__"

DTYPE_CODES = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<i4"),
    4: np.dtype("<i8"),
    5: np.dtype("<u1"),
}
_CODE_FOR_KIND = {np.dtype(d).str.lstrip("<"): c for c, d in DTYPE_CODES.items()}


class ContainerError(Exception):
    """Raised on malformed container files or unsupported dtypes."""


def _code_for(arr):
    key = np.dtype(arr.dtype).newbyteorder("<").str.lstrip("<")
    code = _CODE_FOR_KIND.get(key)
    if code is None:
        raise ContainerError(f"unsupported dtype {arr.dtype!r}; supported: "
                             f"{sorted(str(d) for d in DTYPE_CODES.values())}")
    return code


def save_arrays(path, arrays, meta=None):
    """Write `arrays` (dict name -> ndarray) to `path`.

    `meta`, if given, is a JSON-serializable dict stored under the reserved
    "__meta__" entry.  Entry order follows dict insertion order, so writes are
    reproducible byte-for-byte.
    """
    items = []
    for name, arr in arrays.items():
        if name == META_KEY:
            raise ContainerError(f"array name {META_KEY!r} is reserved")
        items.append((name, np.ascontiguousarray(arr)))
    if meta is not None:
        blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"),
                             dtype=np.uint8)
        items.append((META_KEY, blob))

    header = [MAGIC, struct.pack("<II", VERSION, len(items))]
    payloads = []
    for name, arr in items:
        code = _code_for(arr)
        data = arr.astype(DTYPE_CODES[code], copy=False).tobytes(order="C")
        nameb = name.encode("utf-8")
        header.append(struct.pack("<H", len(nameb)))
        header.append(nameb)
        header.append(struct.pack("<BB", code, arr.ndim))
        header.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        header.append(struct.pack("<Q", len(data)))
        payloads.append(data)
    with open(path, "wb") as f:
        for chunk in header:
            f.write(chunk)
        for data in payloads:
            f.write(data)


def load_arrays(path, with_meta=False):
    """Read a container file; returns dict name -> ndarray.

    With `with_meta=True` returns (arrays, meta) where meta is the embedded
    JSON dict or None.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    off = 12
    table = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + name_len].decode("utf-8")
        off += name_len
        code, ndim = struct.unpack_from("<BB", raw, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}Q", raw, off)
        off += 8 * ndim
        (size,) = struct.unpack_from("<Q", raw, off)
        off += 8
        if code not in DTYPE_CODES:
            raise ContainerError(f"{path}: unknown dtype code {code} for {name!r}")
        table.append((name, code, shape, size))
    arrays = {}
    for name, code, shape, size in table:
        dtype = DTYPE_CODES[code]
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if expected != size:
            raise ContainerError(f"{path}: size mismatch for {name!r}: "
                                 f"table says {size}, shape implies {expected}")
        if off + size > len(raw):
            raise ContainerError(f"{path}: truncated payload for {name!r}")
        arr = np.frombuffer(raw[off:off + size], dtype=dtype).reshape(shape)
        off += size
        arrays[name] = arr.copy()
    meta = None
    if META_KEY in arrays:
        meta = json.loads(arrays.pop(META_KEY).tobytes().decode("utf-8"))
    if with_meta:
        return arrays, meta
    return arrays
