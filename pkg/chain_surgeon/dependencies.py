from typing import Optional

from chain_surgeon.config import settings
from chain_surgeon.worker_pool import WorkerPool


def get_worker_pool(jobs: Optional[int] = None) -> WorkerPool:
    return WorkerPool(jobs if jobs is not None else settings.JOBS)
