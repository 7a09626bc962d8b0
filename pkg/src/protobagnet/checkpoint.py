"""Single-file checkpoint container.

Layout: one ASCII magic line ``PROTOBAGNET-CHECKPOINT <version> <header bytes>``,
a JSON header (metadata plus an array manifest of name, dtype, shape and byte
offset), then the little-endian raw array data back to back.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = "PROTOBAGNET-CHECKPOINT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    arrays: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_bytes(self):
        manifest, chunks, offset = [], [], 0
        for name, arr in self.arrays.items():
            arr = np.ascontiguousarray(arr)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = le.tobytes()
            manifest.append(
                {"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
            )
            chunks.append(raw)
            offset += len(raw)
        header = json.dumps(
            {"format_version": FORMAT_VERSION, "arrays": manifest, "meta": self.meta},
            sort_keys=True,
            separators=(",", ":"),
        ).encode()
        first = f"{MAGIC} {FORMAT_VERSION} {len(header)}\n".encode()
        return first + header + b"\n" + b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob):
        nl = blob.find(b"\n")
        try:
            magic, version, hlen = blob[:nl].decode().split(" ")
            version, hlen = int(version), int(hlen)
        except ValueError:
            raise CheckpointError("not a checkpoint file") from None
        if magic != MAGIC:
            raise CheckpointError("not a checkpoint file")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format version {version}")
        header = json.loads(blob[nl + 1 : nl + 1 + hlen])
        base = nl + 1 + hlen + 1
        arrays = {}
        for entry in header["arrays"]:
            start = base + entry["offset"]
            data = blob[start : start + entry["nbytes"]]
            if len(data) != entry["nbytes"]:
                raise CheckpointError(f"truncated array {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(data, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        return cls(arrays, header["meta"])

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())
