import contextvars
import functools
from typing import Any, Awaitable, Callable, List, Optional, Sequence, TypeVar

import anyio

T = TypeVar("T")


def callable_in_thread_pool(
    call: Callable[..., T], limiter: Optional[anyio.CapacityLimiter] = None
) -> Callable[..., Awaitable[T]]:
    async def inner(*args: Any, **kwargs: Any) -> T:
        # Ensure we run in the same context
        child = functools.partial(call, *args, **kwargs)
        context = contextvars.copy_context()
        return await anyio.to_thread.run_sync(context.run, child, limiter=limiter)

    return inner


async def map_in_threads(call: Callable[[Any], T], items: Sequence[Any], max_workers: int = 4) -> List[T]:
    """Run ``call`` over ``items`` in worker threads; results keep input order.

    The first failure cancels the remaining work and propagates.
    """
    limiter = anyio.CapacityLimiter(max(max_workers, 1))
    threaded = callable_in_thread_pool(call, limiter)
    results: List[Any] = [None] * len(items)

    async def run_one(index: int) -> None:
        results[index] = await threaded(items[index])

    async with anyio.create_task_group() as tg:
        for index in range(len(items)):
            tg.start_soon(run_one, index)
    return results
