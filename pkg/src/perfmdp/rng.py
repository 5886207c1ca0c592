"""Counter-based random streams.

Every random draw in the package goes through a Philox generator whose key is
derived by hashing (seed, label, round, draw). Philox is counter-based, so any
stream can be reconstructed in isolation: reproducing round 17 of a run does
not require replaying rounds 0..16. Labels name the purpose of the stream
("dataset-sa", "pd-tuples", ...) so two consumers never share a key.
"""

import hashlib

import numpy as np


def stream_key(seed: int, label: str, round_index: int = 0, draw_index: int = 0) -> int:
    """128-bit Philox key for one logical stream."""
    text = f"{int(seed)}|{label}|{int(round_index)}|{int(draw_index)}"
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "big")


def substream(seed: int, label: str, round_index: int = 0, draw_index: int = 0) -> np.random.Generator:
    """Independent generator for one (seed, label, round, draw) tuple."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, label, round_index, draw_index)))


def stream_digest(seed: int, label: str, round_index: int = 0, draw_index: int = 0) -> str:
    """Short hex fingerprint of the stream key, recorded in traces."""
    return format(stream_key(seed, label, round_index, draw_index), "032x")[:16]
