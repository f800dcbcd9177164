"""Named random substreams derived from one root seed.

Changing how one stream is consumed (say, the perturbation sampler) leaves the
others untouched, so ablations differ only where they should.
"""
import zlib

import numpy as np
import torch

STREAMS = ("data", "init", "perturbation", "shuffle", "split", "noise-count")


def _key(name: str) -> int:
    return zlib.crc32(name.encode())


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *extra)``."""
    return np.random.default_rng([int(seed), _key(name), *map(int, extra)])


def torch_generator(seed: int, name: str = "init") -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(substream(seed, name).integers(2**62)))
    return g
