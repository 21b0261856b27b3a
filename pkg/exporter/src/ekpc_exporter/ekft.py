"""EKFT feature-file writer.

Independent implementation of the engine's on-disk contract so the two
sides of the format are honest counterparties:

    magic "EKFT" | u32 version | u32 sample count | u32 d_t | u32 d
    | u32 class count, then per sample: u32 label followed by d_t * d
    little-endian float32 token values, row-major.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"EKFT"
VERSION = 1

_HEADER = struct.Struct("<4sIIIII")


def write_ekft(path, tokens: np.ndarray, labels: np.ndarray, n_classes: int) -> None:
    tokens = np.ascontiguousarray(tokens, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.uint32)
    if tokens.ndim != 3:
        raise ValueError(f"tokens must be (N, d_t, d), got {tokens.shape}")
    if labels.shape != (tokens.shape[0],):
        raise ValueError("one label per sample required")
    if labels.size and int(labels.max()) >= n_classes:
        raise ValueError("label outside declared class count")
    n, d_t, d = tokens.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, d_t, d, n_classes))
        for i in range(n):
            fh.write(struct.pack("<I", int(labels[i])))
            fh.write(tokens[i].astype("<f4").tobytes())
