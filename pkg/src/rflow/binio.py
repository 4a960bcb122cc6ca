"""Small versioned binary container: magic + JSON header + float64 blocks.

Layout: 4-byte magic, little-endian uint32 format version, uint32 header
length, canonical JSON header (sorted keys, no whitespace), then the raw
little-endian float64 data of each array in the order listed under the
header's "arrays" key.  Used for prior ensembles and model checkpoints.
"""

import json
import struct

import numpy as np

FORMAT_VERSION = 1


def write_record(path, magic, header, arrays):
    """Write ``arrays`` (an ordered name -> float64 ndarray map) with a header."""
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    hdr = dict(header)
    hdr["arrays"] = [
        {"name": name, "shape": list(np.asarray(a).shape)} for name, a in arrays.items()
    ]
    blob = json.dumps(hdr, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(magic if isinstance(magic, bytes) else magic.encode("ascii"))
        f.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        f.write(blob)
        for a in arrays.values():
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_record(path, magic):
    """Read back (header, arrays). Raises ValueError on a wrong magic/version."""
    want = magic if isinstance(magic, bytes) else magic.encode("ascii")
    with open(path, "rb") as f:
        got = f.read(4)
        if got != want:
            raise ValueError(f"bad magic {got!r}, expected {want!r}")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported format version {version}")
        header = json.loads(f.read(hlen).decode("utf-8"))
        arrays = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError("truncated data block")
            arrays[spec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        trailing = f.read(1)
        if trailing:
            raise ValueError("trailing bytes after data blocks")
    return header, arrays
