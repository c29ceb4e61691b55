"""Named random substreams derived from one master seed."""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("data", "init", "shuffle", "dropout", "bootstrap", "probe", "noise")


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(master: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for ``(master, name, *keys)``.

    The same arguments always yield the same stream, so patch, epoch, and
    resample indices can be used as counters.
    """
    entropy = [int(master), stream_key(name), *(int(k) for k in keys)]
    return np.random.default_rng(np.random.SeedSequence(entropy))
