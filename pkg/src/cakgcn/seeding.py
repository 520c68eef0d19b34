"""One user-facing seed fanned out into independent named streams."""

import zlib

import numpy as np

STREAMS = ("split", "init", "sampling", "dropout", "kmeans", "synth", "shuffle", "eval")


def subseed(seed, name):
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)[0])


def stream(seed, name):
    return np.random.default_rng(subseed(seed, name))
