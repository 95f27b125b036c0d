from typing import Iterator, List, Sequence, TypeVar

from more_itertools import chunked

T = TypeVar("T")


def iter_pages(items: Sequence[T], page_size: int) -> Iterator[List[T]]:
    """Every page of `items` in order; the last page may be short."""
    if page_size < 1:
        raise ValueError("page_size must be positive")
    yield from chunked(items, page_size)
