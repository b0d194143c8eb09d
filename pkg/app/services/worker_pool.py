"""
Process pool for independent solves and simulations.

Tasks must be module-level functions on picklable payloads; models are
rebuilt inside workers from their registry name and parameters. Results
come back in input order.
"""
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

from loguru import logger

from config.settings import settings

T = TypeVar("T")
R = TypeVar("R")


class WorkerPool:
    def __init__(self, workers: Optional[int] = None):
        self.workers = max(1, int(workers or settings.workers))

    def map(self, fn: Callable[[T], R], items: Iterable[T], chunksize: int = 1) -> List[R]:
        items = list(items)
        if self.workers == 1 or len(items) <= 1:
            return [fn(item) for item in items]
        logger.debug(f"dispatching {len(items)} tasks to {self.workers} workers")
        with ProcessPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, items, chunksize=chunksize))
