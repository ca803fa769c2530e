"""Counter-based random streams for reproducible, partitionable sampling.

Sample indices are cut into fixed blocks of BLOCK_SIZE. Each block draws from
its own Philox stream keyed by the run seed, so the numbers a block sees do
not depend on which worker runs it or how many workers there are.
"""

import logging
from multiprocessing import Pool
from typing import Callable, List, Tuple, TypeVar

import numpy as np

from nlclab.errors import ValidationFailure


logger = logging.getLogger(__name__)

BLOCK_SIZE = 1 << 16
_SEED_LIMIT = 1 << 64

T = TypeVar("T")


def check_seed(seed: int) -> int:
    if not 0 <= int(seed) < _SEED_LIMIT:
        raise ValidationFailure(f"seed must be an unsigned 64-bit integer, got {seed}")
    return int(seed)


def block_generator(seed: int, block: int, stream: int = 0) -> np.random.Generator:
    """Generator for one block; ``stream`` separates independent draws under one seed."""

    counter = np.array([0, 0, stream, block], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=check_seed(seed), counter=counter))


def block_ranges(n_samples: int, block_size: int = BLOCK_SIZE) -> List[Tuple[int, int]]:
    """(block index, sample count) pairs covering ``n_samples``."""

    if n_samples < 1:
        raise ValidationFailure(f"n_samples must be >= 1, got {n_samples}")
    full, tail = divmod(n_samples, block_size)
    blocks = [(k, block_size) for k in range(full)]
    if tail:
        blocks.append((full, tail))
    return blocks


def map_blocks(
    fn: Callable[[int, int], T],
    n_samples: int,
    workers: int = 1,
    block_size: int = BLOCK_SIZE,
) -> List[T]:
    """Run ``fn(block, count)`` over every block, in block order.

    ``fn`` must be picklable (a module-level function or a partial of one)
    when ``workers > 1``.
    """

    if workers < 1:
        raise ValidationFailure(f"workers must be >= 1, got {workers}")
    blocks = block_ranges(n_samples, block_size)
    if workers == 1 or len(blocks) == 1:
        return [fn(block, count) for block, count in blocks]
    logger.debug("sampling %d blocks on %d workers", len(blocks), workers)
    with Pool(processes=min(workers, len(blocks))) as pool:
        return pool.starmap(fn, blocks)
