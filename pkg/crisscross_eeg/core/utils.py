"""Shared helpers: seeding, thread control and timestamps."""

import functools
import hashlib
import logging
import threading
from collections.abc import Callable
from datetime import datetime
from typing import TypeVar

import numpy as np
import torch

from crisscross_eeg.core.errors import ConfigError

logger = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}

T = TypeVar("T")


def get_timestamp() -> str:
    """Get current timestamp formatted for report headers."""
    return datetime.now().strftime("%Y-%m-%d %H:%M:%S")


def derive_seed(master_seed: int, *keys: int | str) -> int:
    """Derive an independent 63-bit seed from a master seed and a key path.

    Used so that per-step randomness (masks, dropout) depends only on
    (master seed, step) and a resumed run replays it exactly.
    """
    text = ":".join(str(k) for k in (master_seed, *keys))
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFF_FFFF_FFFF_FFFF


def torch_generator(seed: int) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


def numpy_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def configure_threads(threads: int | None) -> None:
    """Pin torch's intra-op thread count (results are reproducible per count)."""
    if threads is None:
        return
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")
    torch.set_num_threads(threads)
    logger.info("Using %d torch threads", threads)


def thread_cached(
    maxsize: int = 16,
) -> Callable[[Callable[..., T]], Callable[..., T]]:
    """Memoize on positional arguments, with a separate cache in every thread.

    For stateful results (module skeletons whose parameters are swapped during
    a forward) that must not be shared between concurrent callers.
    """

    def decorator(fn: Callable[..., T]) -> Callable[..., T]:
        local = threading.local()

        @functools.wraps(fn)
        def wrapper(*args):
            cache: dict = local.__dict__.setdefault("cache", {})
            if args in cache:
                return cache[args]
            if len(cache) >= maxsize:
                cache.pop(next(iter(cache)))
            cache[args] = result = fn(*args)
            return result

        return wrapper

    return decorator


def resolve_dtype(name: str) -> torch.dtype:
    try:
        return DTYPES[name]
    except KeyError:
        raise ConfigError(
            f"Unsupported precision {name!r}; use one of {list(DTYPES)}"
        ) from None
