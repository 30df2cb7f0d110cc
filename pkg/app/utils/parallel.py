"""Block-partitioned worker pool."""

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence, TypeVar

from app.config import Config

T = TypeVar("T")
R = TypeVar("R")


def block_slices(total: int, block_size: Optional[int] = None) -> List[slice]:
    """Split ``range(total)`` into consecutive fixed-size slices."""
    size = block_size or Config.PARTICLE_BLOCK_SIZE
    return [slice(start, min(start + size, total)) for start in range(0, total, size)]


def map_items(
    func: Callable[[T], R], items: Sequence[T], workers: Optional[int] = None
) -> List[R]:
    """Apply ``func`` to each item on a thread pool, returning results in input order."""
    workers = workers or Config.WORKERS
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as executor:
        return list(executor.map(func, items))


def map_blocks(
    func: Callable[[int, slice], R],
    total: int,
    block_size: Optional[int] = None,
    workers: Optional[int] = None,
) -> List[R]:
    """
    Run ``func(block_index, block_slice)`` over fixed-size blocks of ``range(total)``.

    Block boundaries depend only on ``total`` and ``block_size``, so callers
    that key their random streams by block index get identical numbers for
    any worker count.

    Args:
        func: Work for one block
        total: Number of items (particles, draws, ...)
        block_size: Items per block, defaults to Config.PARTICLE_BLOCK_SIZE
        workers: Thread count, defaults to Config.WORKERS

    Returns:
        List: One result per block, in block order
    """
    blocks = list(enumerate(block_slices(total, block_size)))
    return map_items(lambda item: func(item[0], item[1]), blocks, workers)
