from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar
import logging

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class WorkerPool:
    """Order-preserving map over worker processes; runs in-process when jobs == 1.

    Job functions must be module-level and their arguments picklable. Results
    never depend on ``jobs`` because every job draws from its own keyed stream.
    """

    def __init__(self, jobs: int = 1):
        if jobs < 1:
            raise ValueError(f"jobs must be at least 1, got {jobs}")
        self.jobs = jobs
        self._executor: Optional[ProcessPoolExecutor] = None

    def __repr__(self) -> str:
        return f"WorkerPool(jobs={self.jobs})"

    @property
    def parallel(self) -> bool:
        return self.jobs > 1

    def start(self) -> "WorkerPool":
        if self.parallel and self._executor is None:
            self._executor = ProcessPoolExecutor(max_workers=self.jobs)
            logger.info(f"Worker pool started with {self.jobs} processes")
        return self

    def map(self, fn: Callable[[T], R], items: Iterable[T]) -> List[R]:
        items = list(items)
        if not self.parallel or len(items) < 2:
            return [fn(item) for item in items]
        self.start()
        logger.debug(f"Dispatching {len(items)} jobs of {fn.__name__} to {self.jobs} workers")
        return list(self._executor.map(fn, items))

    def shutdown(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None
            logger.info("Worker pool stopped")

    def __enter__(self) -> "WorkerPool":
        return self.start()

    def __exit__(self, exc_type, exc, tb) -> None:
        self.shutdown()
