"""
Utility functions for the open-world evasion bench
"""

import logging
import threading
import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, Iterable, List, Optional, Sequence, TypeVar

import numpy as np

T = TypeVar('T')
R = TypeVar('R')

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'

logger = logging.getLogger(__name__)


class BenchError(Exception):
    """Base class for every error raised by the bench."""
    pass


def setup_logging(verbosity: int = 0) -> None:
    """
    Configure root logging once for CLI runs.

    Args:
        verbosity: 0 for warnings only, 1 for info, 2 or more for debug
    """
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    logging.basicConfig(level=level, format=LOG_FORMAT)
    logging.getLogger('openworld_bench').setLevel(level)


def derive_seed(base_seed: int, *labels: object) -> int:
    """
    Derive a stable 63-bit seed from a base seed and a sequence of labels.

    Python's ``hash`` is salted per process, so labels are folded through CRC32
    instead; the result is identical across runs and machines.

    Examples:
        >>> derive_seed(0, 'mnist', 'pgd') == derive_seed(0, 'mnist', 'pgd')
        True
    """
    base = int(base_seed)
    entropy = [base & 0xFFFFFFFF, base >> 32]
    for label in labels:
        entropy.append(zlib.crc32(str(label).encode('utf-8')))
    seq = np.random.SeedSequence(entropy)
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


class SeedLog:
    """
    Derives seeds from one base seed and remembers every seed it hands out.

    Keys are the labels joined by slashes. Safe to call from worker threads.
    """

    def __init__(self, base_seed: int):
        self.base_seed = base_seed
        self.seeds: Dict[str, int] = {}
        self._lock = threading.Lock()

    def __call__(self, *labels: object) -> int:
        value = derive_seed(self.base_seed, *labels)
        with self._lock:
            self.seeds['/'.join(str(label) for label in labels)] = value
        logger.debug("Seed %s = %d", labels, value)
        return value


def parallel_map(func: Callable[[T], R], items: Sequence[T], max_workers: int = 1,
                 progress_callback: Optional[Callable[[str], None]] = None) -> List[R]:
    """
    Map ``func`` over ``items`` with a thread pool, preserving input order.

    Args:
        func: Function applied to each item; must not share mutable state
        items: Items to process
        max_workers: Thread count; 1 runs inline
        progress_callback: Optional callback receiving one message per finished item

    Returns:
        Results in the same order as ``items``
    """
    total = len(items)
    if max_workers <= 1 or total <= 1:
        results = []
        for idx, item in enumerate(items, 1):
            results.append(func(item))
            if progress_callback:
                progress_callback(f"[{idx}/{total}]")
        return results

    results: List[R] = []
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        for idx, result in enumerate(executor.map(func, items), 1):
            results.append(result)
            if progress_callback:
                progress_callback(f"[{idx}/{total}]")
    return results


def chunked(indices: np.ndarray, size: int) -> Iterable[np.ndarray]:
    """Yield consecutive slices of ``indices`` of length ``size`` (last one ragged)."""
    for start in range(0, len(indices), size):
        yield indices[start:start + size]
