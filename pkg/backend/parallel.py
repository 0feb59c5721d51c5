import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable

import numpy as np

logger = logging.getLogger(__name__)


def map_particles(fn: Callable[[slice], np.ndarray], n: int, workers: int = 1) -> np.ndarray:
    """
    Evaluate a row-wise function over particle chunks and stack the results.

    ``fn`` receives a slice of particle indices and must compute each row from
    that particle's data only, so the output does not depend on ``workers``.
    """
    if workers <= 1 or n < 2 * workers:
        return fn(slice(0, n))

    bounds = np.linspace(0, n, workers + 1).astype(int)
    chunks = [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(fn, chunks))
    return np.concatenate(parts, axis=0)
