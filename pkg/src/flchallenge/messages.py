"""Client-to-server payloads and their wire-size accounting.

Size model: a dense segment costs 8 bytes per value plus a 16-byte header;
a sparse delta costs 12 bytes per retained entry (4-byte index, 8-byte
value) plus one 16-byte header.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .model import ParamVector

HEADER_BYTES = 16
VALUE_BYTES = 8
INDEX_BYTES = 4


@dataclass(frozen=True)
class SparseDelta:
    indices: np.ndarray
    values: np.ndarray
    dense_len: int
    layout: tuple = field(default=(), compare=False)

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        vals = np.asarray(self.values, dtype=float)
        if idx.shape != vals.shape or idx.ndim != 1:
            raise ShapeError("indices and values must be 1-D and equal length")
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= self.dense_len):
            raise ShapeError("indices must be strictly increasing within [0, dense_len)")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return int(self.indices.size)

    def dense(self) -> np.ndarray:
        out = np.zeros(self.dense_len)
        out[self.indices] = self.values
        return out

    def densify(self) -> ParamVector:
        if not self.layout:
            raise ShapeError("sparse delta carries no layout")
        return ParamVector.from_flat(self.layout, self.dense())


@dataclass(frozen=True)
class ClientUpdate:
    """Everything a client sends after one round. No samples, only numbers."""

    client_id: int
    n_samples: int
    delta: ParamVector | SparseDelta
    control_delta: ParamVector | None = None
    wire_bytes: int = 0

    def dense_delta(self) -> ParamVector:
        if isinstance(self.delta, SparseDelta):
            return self.delta.densify()
        return self.delta

    def with_wire_size(self) -> "ClientUpdate":
        return ClientUpdate(self.client_id, self.n_samples, self.delta,
                            self.control_delta, wire_size(self))


def payload_size(payload: ParamVector | SparseDelta | None) -> int:
    if payload is None:
        return 0
    if isinstance(payload, SparseDelta):
        return HEADER_BYTES + (INDEX_BYTES + VALUE_BYTES) * len(payload)
    return sum(HEADER_BYTES + VALUE_BYTES * v.size for _, v in payload.items())


def wire_size(update: ClientUpdate) -> int:
    return payload_size(update.delta) + payload_size(update.control_delta)
