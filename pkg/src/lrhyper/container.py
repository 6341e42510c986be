"""Binary container for named arrays.

Layout: 8-byte magic, little-endian uint64 header length, a UTF-8 JSON
header, then the raw array bytes back to back.  The header carries a
user-supplied metadata dict plus one entry per array with its name, shape,
dtype, and byte offset relative to the start of the data section.  All
arrays are stored little-endian; floats as <f8, integers as <i8.

The same container backs both exported datasets and checkpoints, so a
single pair of functions covers all on-disk artifacts.
"""

import json

import numpy as np

MAGIC = b"LRHARR1\n"

_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


def _canonical(arr):
    arr = np.asarray(arr)
    if np.issubdtype(arr.dtype, np.floating):
        return np.ascontiguousarray(arr, dtype="<f8")
    if np.issubdtype(arr.dtype, np.integer):
        return np.ascontiguousarray(arr, dtype="<i8")
    raise TypeError(f"unsupported dtype {arr.dtype}")


def save_arrays(path, metadata, arrays):
    """Write ``arrays`` (name -> ndarray) with a JSON ``metadata`` dict."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = _canonical(arrays[name])
        blob = arr.tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.str,
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"metadata": metadata, "entries": entries},
                        sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint64(len(header)).tobytes())
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_arrays(path):
    """Read a container; returns (metadata, name -> ndarray)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not an array container (bad magic)")
    hlen = int(np.frombuffer(raw, dtype="<u8", count=1,
                             offset=len(MAGIC))[0])
    start = len(MAGIC) + 8
    try:
        header = json.loads(raw[start : start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"{path}: corrupt header ({e})") from e
    data = raw[start + hlen :]
    arrays = {}
    for e in header["entries"]:
        end = e["offset"] + e["nbytes"]
        if end > len(data):
            raise ValueError(f"{path}: truncated (array {e['name']!r})")
        dtype = _DTYPES[e["dtype"]]
        arrays[e["name"]] = np.frombuffer(
            data, dtype=dtype, count=e["nbytes"] // dtype.itemsize,
            offset=e["offset"],
        ).reshape(e["shape"]).copy()
    return header["metadata"], arrays
