"""Seed-stream discipline: one root seed, deterministic named sub-streams.

Every random draw in the package flows through a generator obtained from
``make_generator(root_seed, *path)``. Two call sites that name the same
path get bitwise-identical draws, which is what makes the cascade
factorization and resume tests exact.
"""

from __future__ import annotations

import hashlib

import torch

_MASK63 = (1 << 63) - 1


def stream_seed(root_seed: int, *path: str | int) -> int:
    """Derive a 63-bit seed for the sub-stream named by ``path``.

    The derivation hashes the root seed together with the path components,
    so streams with different names are statistically independent and a
    stream's seed never depends on how many other streams were drawn.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(root_seed)).encode())
    for part in path:
        h.update(b"/")
        h.update(str(part).encode())
    return int.from_bytes(h.digest(), "little") & _MASK63


def make_generator(root_seed: int, *path: str | int) -> torch.Generator:
    """CPU torch generator seeded for the named sub-stream."""
    gen = torch.Generator(device="cpu")
    gen.manual_seed(stream_seed(root_seed, *path))
    return gen


def randn(shape, root_seed: int, *path: str | int, dtype=torch.float64) -> torch.Tensor:
    """Standard-normal draw from the named stream."""
    return torch.randn(shape, generator=make_generator(root_seed, *path), dtype=dtype)


def randint(low: int, high: int, root_seed: int, *path: str | int) -> int:
    """Uniform integer in [low, high) from the named stream."""
    gen = make_generator(root_seed, *path)
    return int(torch.randint(low, high, (1,), generator=gen).item())
