"""
Utility functions and classes for the benchmark engine
"""

import os
import sys
import hashlib
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime
from pathlib import Path
from typing import Callable, List, Optional, Sequence, TypeVar

import numpy as np
from tqdm import tqdm

T = TypeVar('T')
R = TypeVar('R')

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(log_dir: Optional[str] = None, level: int = logging.INFO,
                  fmt: str = LOG_FORMAT) -> logging.Logger:
    """Setup logging configuration

    Console output goes to stderr so reports printed on stdout stay parseable.

    Args:
        log_dir: Directory to store log files (no file handler when None)
        level: Logging level
        fmt: Record format

    Returns:
        Configured logger
    """
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]

    if log_dir:
        Path(log_dir).mkdir(parents=True, exist_ok=True)
        log_file = os.path.join(
            log_dir,
            f"lung_benchmark_{datetime.now().strftime('%Y%m%d_%H%M%S')}.log"
        )
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(level=level, format=fmt, handlers=handlers, force=True)

    return logging.getLogger(__name__)


class Timer:
    """Simple timer for measuring execution time"""

    def __init__(self):
        self._start_time = None
        self._end_time = None

    def start(self) -> 'Timer':
        self._start_time = time.perf_counter()
        return self

    def stop(self) -> float:
        self._end_time = time.perf_counter()
        return self.elapsed()

    def elapsed(self) -> float:
        """Get elapsed time in seconds"""
        if self._start_time is None:
            return 0.0
        end = self._end_time or time.perf_counter()
        return end - self._start_time

    def __enter__(self) -> 'Timer':
        self.start()
        return self

    def __exit__(self, *args):
        self.stop()


def file_digest(path: str, chunk_size: int = 1 << 20) -> str:
    """SHA-256 hex digest of a file

    Args:
        path: File path
        chunk_size: Read size in bytes

    Returns:
        Hex digest string
    """
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(chunk_size), b''):
            digest.update(block)
    return digest.hexdigest()


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def format_duration(seconds: float) -> str:
    """Format duration in human-readable format (e.g. "2m 30s")"""
    if seconds < 60:
        return f"{seconds:.1f}s"
    elif seconds < 3600:
        minutes = int(seconds // 60)
        secs = int(seconds % 60)
        return f"{minutes}m {secs}s"
    else:
        hours = int(seconds // 3600)
        minutes = int((seconds % 3600) // 60)
        return f"{hours}h {minutes}m"


def replicate_generators(seed: int, n: int) -> List[np.random.Generator]:
    """One independent generator per replicate, derived from (seed, index)

    Child streams depend only on the root seed and the replicate index, so
    results do not depend on which worker runs which replicate.
    """
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.default_rng(child) for child in children]


def ordered_map(func: Callable[[T], R], items: Sequence[T],
                max_workers: int = 1, description: Optional[str] = None,
                show_progress: bool = False) -> List[R]:
    """Map func over items, optionally on a thread pool, keeping input order

    Args:
        func: Function applied to every item
        items: Inputs
        max_workers: Thread count; 1 runs inline
        description: Progress bar label
        show_progress: Display a tqdm progress bar

    Returns:
        Results in the order of items
    """
    bar = tqdm(total=len(items), desc=description, disable=not show_progress,
               leave=False)
    try:
        if max_workers <= 1 or len(items) <= 1:
            results = []
            for item in items:
                results.append(func(item))
                bar.update(1)
            return results

        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = []
            for result in pool.map(func, items):
                results.append(result)
                bar.update(1)
            return results
    finally:
        bar.close()


__all__ = [
    'setup_logging',
    'Timer',
    'file_digest',
    'text_digest',
    'format_duration',
    'replicate_generators',
    'ordered_map',
    'LOG_FORMAT'
]
