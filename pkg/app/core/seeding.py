"""
Root-seed plumbing.

Every random draw in the package comes from a named sub-stream of one root seed.
Streams are counter-based (Philox) and keyed by (stream, *key), e.g. ("mask", epoch)
or ("data", patient_index), so any draw can be reproduced without replaying the
draws before it.
"""

import logging
from typing import Tuple

import numpy as np
import torch

logger = logging.getLogger(__name__)

STREAMS: Tuple[str, ...] = ("data", "mask", "init", "dropout")
_STREAM_INDEX = {name: idx for idx, name in enumerate(STREAMS)}


class SeedStreams:
    def __init__(self, root_seed: int):
        if root_seed < 0:
            raise ValueError("root seed must be non-negative")
        self.root_seed = int(root_seed)

    def _sequence(self, stream: str, *key: int) -> np.random.SeedSequence:
        if stream not in _STREAM_INDEX:
            raise ValueError(f"unknown random stream '{stream}'")
        return np.random.SeedSequence(
            entropy=self.root_seed,
            spawn_key=(_STREAM_INDEX[stream], *(int(k) for k in key)),
        )

    def numpy(self, stream: str, *key: int) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(self._sequence(stream, *key)))

    def torch_seed(self, stream: str, *key: int) -> int:
        state = self._sequence(stream, *key).generate_state(1, dtype=np.uint64)[0]
        return int(state) & ((1 << 63) - 1)

    def torch(self, stream: str, *key: int) -> torch.Generator:
        generator = torch.Generator()
        generator.manual_seed(self.torch_seed(stream, *key))
        return generator

    def seed_global_torch(self, stream: str, *key: int) -> None:
        """Reseed torch's global generator (used by dropout layers)."""
        torch.manual_seed(self.torch_seed(stream, *key))


def configure_determinism(threads: int = 1) -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(max(1, int(threads)))
    logger.debug("deterministic torch, %d thread(s)", threads)
