"""Deterministic single-file container for model parameters.

Layout: 8-byte magic, little-endian u32 container version, u64 header
length, UTF-8 JSON header, then the raw little-endian float64 payload of
every section in header order. The JSON header carries the model kind,
free-form metadata and the (name, shape) list of sections. Unlike zip
archives there are no timestamps, so identical parameters always produce
identical bytes.
"""

import json
import struct

import numpy as np

__all__ = ["save_sections", "load_sections"]

MAGIC = b"DUALREC\x00"
VERSION = 1


def save_sections(path, kind: str, meta: dict, sections) -> None:
    """Write named float64 arrays in the given order.

    ``sections`` is a sequence of (name, array); the order is recorded in
    the header and preserved on load.
    """
    entries = []
    payloads = []
    for name, array in sections:
        arr = np.ascontiguousarray(array, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape)})
        payloads.append(arr.tobytes())
    header = json.dumps(
        {"kind": kind, "meta": meta, "sections": entries},
        separators=(",", ":"),
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for payload in payloads:
            fh.write(payload)


def load_sections(path):
    """Read a container; returns (kind, meta, dict name -> array)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a dualrec checkpoint")
        version, header_len = struct.unpack("<IQ", fh.read(12))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        arrays = {}
        for entry in header["sections"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = fh.read(count * 8)
            if len(data) != count * 8:
                raise ValueError(f"{path}: truncated section {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(data, dtype="<f8").astype(
                np.float64
            ).reshape(shape)
    return header["kind"], header["meta"], arrays
