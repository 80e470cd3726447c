# BSD 3-Clause License
#
# Copyright (c) 2024, The attr-desk developers. All rights reserved.
# Use of this source code is governed by the BSD 3-Clause License that can be
# found in the LICENSE file at the root of this repository.

"""checkpoint.py: the ATTRCKPT flat binary tensor container.

Layout: the 8-byte magic "ATTRCKPT", a little-endian u32 version, then for
each tensor in sorted name order: u32 name length, UTF-8 name, u32 rank,
rank u32 dims and the little-endian f32 payload.
"""

import logging
import struct
import typing as t

import numpy as np

import src.fileparse as fileparse

MAGIC = b"ATTRCKPT"
VERSION = 1


class CheckpointError(fileparse.DataError):
    """The file is not a readable checkpoint."""


def write_checkpoint(path: str, tensors: t.Mapping[str, np.ndarray]):
    """Write named arrays to path, as 32-bit floats in sorted name order."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name in sorted(tensors):
            array = np.asarray(tensors[name], dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", array.ndim))
            f.write(struct.pack("<{}I".format(array.ndim), *array.shape))
            f.write(array.tobytes())
    logging.debug("Wrote %s tensors to %s.", len(tensors), path)


def read_checkpoint(path: str) -> t.Dict[str, np.ndarray]:
    """
    Read every tensor of a checkpoint file.

    Raises:
      CheckpointError: the file cannot be read, has the wrong magic or version,
        or is truncated.
    """
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError("{}: {}".format(path, e.strerror))
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError("{}: not an ATTRCKPT file".format(path))
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError("{}: truncated at byte {}".format(path, pos))
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    version, = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError("{}: unsupported version {}".format(path, version))

    tensors = {}
    while pos < len(raw):
        n, = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        rank, = struct.unpack("<I", take(4))
        dims = struct.unpack("<{}I".format(rank), take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).copy()
    return tensors
