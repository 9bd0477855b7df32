"""Order-preserving parallel map.

Tasks carry their own RNG substream keys, so results never depend on the
worker count; this module only decides where the work runs.
"""

import os
from concurrent.futures import ProcessPoolExecutor


def available_workers():
    try:
        return max(len(os.sched_getaffinity(0)), 1)
    except AttributeError:
        return max(os.cpu_count() or 1, 1)


def pmap(func, items, workers=1, chunksize=None):
    items = list(items)
    workers = int(workers or 1)
    if workers <= 1 or len(items) <= 1:
        return [func(x) for x in items]
    if chunksize is None:
        chunksize = max(1, len(items) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(func, items, chunksize=chunksize))
