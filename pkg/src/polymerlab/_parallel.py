"""Deterministic fan-out over environment indices."""

from concurrent.futures import ProcessPoolExecutor
import multiprocessing as mp

import numpy as np

CHUNK = 128


def _call(args):
    fn, start, stop, extra = args
    return fn(start, stop, *extra)


def map_envs(fn, n_env: int, workers: int = 1, args: tuple = (), chunk: int = CHUNK) -> np.ndarray:
    """Evaluate ``fn(start, stop, *args)`` on fixed chunks of ``range(n_env)``.

    ``fn`` returns one row per environment.  Chunks do not depend on the
    worker count and are concatenated in index order, so the result is the
    same for any number of workers.
    """
    bounds = [(a, min(a + chunk, n_env)) for a in range(0, n_env, chunk)]
    jobs = [(fn, a, b, args) for a, b in bounds]
    if workers <= 1 or len(jobs) <= 1:
        parts = [_call(j) for j in jobs]
    else:
        ctx = mp.get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            parts = list(pool.map(_call, jobs))
    return np.concatenate(parts, axis=0) if parts else np.empty((0,))
