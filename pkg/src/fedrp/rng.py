"""Deterministic counter-based random streams shared by protocol peers.

The round projection matrix is never transmitted: every client regenerates
it from a shared 64-bit seed, so the generator is part of the wire contract
and is specified exactly:

* word stream: ``word(key, i) = mix64(key + (i + 1) * GOLDEN)`` over
  counter ``i`` (all arithmetic mod 2**64), where ``mix64`` is the
  splitmix64 finalizer with multipliers ``0xBF58476D1CE4E5B9`` and
  ``0x94D049BB133111EB`` and shifts 30 / 27 / 31, and
  ``GOLDEN = 0x9E3779B97F4A7C15``.
* row keying: ``row_key(seed, r) = word(mix64(seed), r)``.
* normals: Box-Muller over consecutive word pairs ``(w0, w1)``:
  ``u1 = ((w0 >> 11) + 1) * 2**-53`` (in (0, 1], never zero) and
  ``u2 = (w1 >> 11) * 2**-53``; then ``radius = sqrt(-2 ln u1)`` yields
  ``radius * cos(2 pi u2)`` and ``radius * sin(2 pi u2)``.

Any implementation following this recipe reproduces the streams bit for
bit. Randomness that never crosses the wire (noise injection, shuffles)
uses numpy's PCG64 instead; see the callers.
"""

from __future__ import annotations

import hashlib

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(x: int) -> int:
    """splitmix64 finalizer on a 64-bit integer (Python-int arithmetic)."""
    x &= _MASK
    x = ((x ^ (x >> 30)) * _M1) & _MASK
    x = ((x ^ (x >> 27)) * _M2) & _MASK
    return x ^ (x >> 31)


def _mix64_array(x: np.ndarray) -> np.ndarray:
    # uint64 ops wrap modulo 2**64, matching mix64 exactly
    x = (x ^ (x >> np.uint64(30))) * np.uint64(_M1)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(_M2)
    return x ^ (x >> np.uint64(31))


def word(key: int, counter: int) -> int:
    """Counter-indexed 64-bit word of the stream under ``key``."""
    return mix64((key + ((counter + 1) * GOLDEN)) & _MASK)


def words(key: int, start: int, count: int) -> np.ndarray:
    """``count`` consecutive stream words starting at counter ``start``."""
    idx = np.arange(start + 1, start + 1 + count, dtype=np.uint64)
    x = (np.uint64(key & _MASK) + idx * np.uint64(GOLDEN)).astype(np.uint64)
    return _mix64_array(x)


def row_key(seed: int, row_index: int) -> int:
    """Stream key for one matrix row; rows i != j never share a key stream."""
    return word(mix64(seed), row_index)


def normals(key: int, count: int) -> np.ndarray:
    """``count`` standard normals from the documented Box-Muller transform."""
    if count <= 0:
        return np.zeros(0)
    pairs = (count + 1) // 2
    w = words(key, 0, 2 * pairs)
    u1 = ((w[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u2 = (w[1::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53
    radius = np.sqrt(-2.0 * np.log(u1))
    theta = (2.0 * np.pi) * u2
    out = np.empty(2 * pairs)
    out[0::2] = radius * np.cos(theta)
    out[1::2] = radius * np.sin(theta)
    return out[:count]


def normal_rows(seed: int, first_row: int, n_rows: int, row_len: int) -> np.ndarray:
    """Block of consecutive row streams as an (n_rows, row_len) matrix."""
    if n_rows <= 0:
        return np.zeros((0, row_len))
    pairs = (row_len + 1) // 2
    keys = np.array(
        [row_key(seed, first_row + r) for r in range(n_rows)], dtype=np.uint64
    )
    idx = np.arange(1, 2 * pairs + 1, dtype=np.uint64)
    w = _mix64_array(keys[:, None] + idx[None, :] * np.uint64(GOLDEN))
    u1 = ((w[:, 0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u2 = (w[:, 1::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53
    radius = np.sqrt(-2.0 * np.log(u1))
    theta = (2.0 * np.pi) * u2
    out = np.empty((n_rows, 2 * pairs))
    out[:, 0::2] = radius * np.cos(theta)
    out[:, 1::2] = radius * np.sin(theta)
    return out[:, :row_len]


def derive_seed(master_seed: int, *tokens: int | str) -> int:
    """One-way mix of a master seed and purpose labels into a fresh 64-bit seed.

    Streams for different (purpose, round, client) labels are independent,
    so adding a consumer never perturbs another's randomness.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update((master_seed & _MASK).to_bytes(8, "big"))
    for tok in tokens:
        if isinstance(tok, bool) or not isinstance(tok, (int, str)):
            raise TypeError(f"seed tokens must be int or str, got {tok!r}")
        if isinstance(tok, int):
            h.update(b"i" + (tok & _MASK).to_bytes(8, "big"))
        else:
            raw = tok.encode("utf-8")
            h.update(b"s" + len(raw).to_bytes(4, "big") + raw)
    return int.from_bytes(h.digest(), "big")


def generator(seed: int) -> np.random.Generator:
    """numpy generator for randomness that never crosses the wire."""
    return np.random.Generator(np.random.PCG64(seed))
