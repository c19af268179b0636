from typing import List, Sequence, TypeVar

T = TypeVar("T")


def derive_seed(base: int, *parts: int) -> int:
    """A child seed for a numbered job; equal inputs give equal seeds."""
    seed = int(base)
    for part in parts:
        seed = (seed * 1000003 + int(part) + 1) % (2 ** 31 - 1)
    return seed


def strided_chunks(items: Sequence[T], count: int) -> List[List[T]]:
    """Split ``items`` round-robin into at most ``count`` non-empty chunks."""
    count = max(1, count)
    return [list(items[i::count]) for i in range(count) if items[i::count]]
