"""Random byte source with an injectable provider.

Crypto-bearing values (IVs, nonces, seed keys, passphrases) are drawn
through :func:`randbytes` so simulation runs can be made reproducible
by installing a seeded provider.  Default is ``os.urandom``.
"""

import os
import random
from contextlib import contextmanager
from typing import Callable, Iterator

_provider: Callable[[int], bytes] = os.urandom


def randbytes(n: int) -> bytes:
    return _provider(n)


def set_provider(provider: Callable[[int], bytes] | None) -> None:
    """Install a byte provider; ``None`` restores ``os.urandom``."""
    global _provider
    _provider = provider if provider is not None else os.urandom


@contextmanager
def seeded(seed: int) -> Iterator[None]:
    """Deterministic bytes within the context. Simulation use only."""
    rng = random.Random(seed)
    old = _provider
    set_provider(rng.randbytes)
    try:
        yield
    finally:
        set_provider(old)
