"""Shared-seed random projection and the sealed seed exchange.

All clients derive an identical m x n matrix A with i.i.d. N(0, 1/n)
entries from a per-round seed; the server only ever relays sealed seed
envelopes and cannot reconstruct A. Rows are regenerated on demand from
the counter-based stream in :mod:`fedrp.rng`, so the matrix is never
materialized unless m*n is small enough to cache.
"""

from __future__ import annotations

import base64
import functools
import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import rng

# Dense caching bound: below this many entries A is materialized and reused.
DENSE_ENTRY_LIMIT = 1 << 22
_ROW_BLOCK = 64


class ProjectionError(ValueError):
    """Dimension mismatch or out-of-range row access."""


class SealError(RuntimeError):
    """Seed envelope could not be opened (wrong key, tampering) or schedule violation."""


@dataclass(frozen=True)
class ProjectionSpec:
    """Identifies one round's matrix: entries of A are N(0, 1/n), seeded."""

    round_seed: int
    m: int
    n: int

    def __post_init__(self) -> None:
        if self.m < 1 or self.n < 1:
            raise ProjectionError(f"m and n must be >= 1, got m={self.m} n={self.n}")


def matrix_row_stream(spec: ProjectionSpec, row_index: int) -> np.ndarray:
    """Row ``row_index`` of A, deterministic in (round_seed, m, n)."""
    if not 0 <= row_index < spec.m:
        raise ProjectionError(f"row {row_index} out of range for m={spec.m}")
    scale = 1.0 / np.sqrt(spec.n)
    return rng.normal_rows(spec.round_seed, row_index, 1, spec.n)[0] * scale


@functools.lru_cache(maxsize=4)
def _dense_matrix(spec: ProjectionSpec) -> np.ndarray:
    blocks = [
        rng.normal_rows(spec.round_seed, r0, min(_ROW_BLOCK, spec.m - r0), spec.n)
        for r0 in range(0, spec.m, _ROW_BLOCK)
    ]
    a = np.vstack(blocks) * (1.0 / np.sqrt(spec.n))
    a.setflags(write=False)
    return a


def _use_dense(spec: ProjectionSpec) -> bool:
    return spec.m * spec.n <= DENSE_ENTRY_LIMIT


def project(spec: ProjectionSpec, w: np.ndarray) -> np.ndarray:
    """z = A w, streaming rows in O(n + m) memory when A is too big to cache."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (spec.n,):
        raise ProjectionError(f"expected parameter vector of length {spec.n}, got shape {w.shape}")
    if _use_dense(spec):
        return _dense_matrix(spec) @ w
    scale = 1.0 / np.sqrt(spec.n)
    z = np.empty(spec.m)
    for r0 in range(0, spec.m, _ROW_BLOCK):
        block = rng.normal_rows(spec.round_seed, r0, min(_ROW_BLOCK, spec.m - r0), spec.n)
        z[r0 : r0 + block.shape[0]] = block @ w * scale
    return z


def project_transpose(spec: ProjectionSpec, v: np.ndarray) -> np.ndarray:
    """A^T v, streaming rows; the adjoint of :func:`project`."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (spec.m,):
        raise ProjectionError(f"expected projected vector of length {spec.m}, got shape {v.shape}")
    if _use_dense(spec):
        return _dense_matrix(spec).T @ v
    scale = 1.0 / np.sqrt(spec.n)
    out = np.zeros(spec.n)
    for r0 in range(0, spec.m, _ROW_BLOCK):
        block = rng.normal_rows(spec.round_seed, r0, min(_ROW_BLOCK, spec.m - r0), spec.n)
        out += block.T @ v[r0 : r0 + block.shape[0]] * scale
    return out


class RandomProjection:
    """Operational form of a ProjectionSpec (matrix-free A and A^T)."""

    def __init__(self, spec: ProjectionSpec):
        self.spec = spec
        self.m = spec.m
        self.n = spec.n

    def project(self, w: np.ndarray) -> np.ndarray:
        return project(self.spec, w)

    def project_transpose(self, v: np.ndarray) -> np.ndarray:
        return project_transpose(self.spec, v)


class IdentityMap:
    """Degenerate projection (m = n, A = scale * I); classic ADMM is this map."""

    def __init__(self, n: int, scale: float = 1.0):
        self.m = n
        self.n = n
        self.scale = scale

    def project(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.n,):
            raise ProjectionError(f"expected vector of length {self.n}, got shape {w.shape}")
        return self.scale * w

    def project_transpose(self, v: np.ndarray) -> np.ndarray:
        return self.project(v)


def as_linear_map(spec_or_map) -> RandomProjection | IdentityMap:
    if isinstance(spec_or_map, ProjectionSpec):
        return RandomProjection(spec_or_map)
    if hasattr(spec_or_map, "project") and hasattr(spec_or_map, "project_transpose"):
        return spec_or_map
    raise TypeError(f"not a projection spec or linear map: {spec_or_map!r}")


# --- sealed seed exchange -------------------------------------------------
#
# The sealing primitive is pluggable; the default wraps Fernet (AES-CBC +
# HMAC), which models "sealed to the recipient" adequately for the protocol.
# Real PKI / key distribution is out of scope.

from cryptography.fernet import Fernet, InvalidToken  # noqa: E402


@dataclass(frozen=True)
class SeedEnvelope:
    round: int
    sealed_payload: bytes
    sender_client: int
    recipient_client: int


def sealing_key_from_seed(key_seed: int) -> bytes:
    """Deterministic per-client sealing key (test/deployment convenience)."""
    raw = hashlib.blake2b(
        (key_seed & ((1 << 64) - 1)).to_bytes(8, "big"), digest_size=32
    ).digest()
    return base64.urlsafe_b64encode(raw)


class SeedLedger:
    """Enforces the fresh-seed schedule: rounds strictly increase, seeds never repeat."""

    def __init__(self) -> None:
        self._last_round: int | None = None
        self._seen_seeds: set[int] = set()

    def register(self, round_index: int, seed: int) -> None:
        if round_index < 0:
            raise SealError(f"round must be nonnegative, got {round_index}")
        if self._last_round is not None and round_index <= self._last_round:
            raise SealError(
                f"round {round_index} not after previously sealed round {self._last_round}"
            )
        if seed in self._seen_seeds:
            raise SealError(f"seed for round {round_index} repeats an earlier round's seed")
        self._last_round = round_index
        self._seen_seeds.add(seed)


def seal_round_seed(
    round_index: int,
    seed: int,
    recipient_keys: Sequence[tuple[int, bytes]],
    sender_client: int = 0,
    ledger: SeedLedger | None = None,
) -> list[SeedEnvelope]:
    """Seal ``seed`` to every (client_id, key) recipient; server can only relay.

    ``ledger``, when given, enforces the monotone-round / distinct-seed rule.
    """
    if ledger is not None:
        ledger.register(round_index, seed)
    payload = (seed & ((1 << 64) - 1)).to_bytes(8, "big")
    envelopes = []
    for client_id, key in recipient_keys:
        sealed = Fernet(key).encrypt(payload)
        envelopes.append(
            SeedEnvelope(
                round=round_index,
                sealed_payload=sealed,
                sender_client=sender_client,
                recipient_client=client_id,
            )
        )
    return envelopes


def open_round_seed(envelope: SeedEnvelope, key: bytes) -> int:
    try:
        payload = Fernet(key).decrypt(envelope.sealed_payload)
    except InvalidToken as exc:
        raise SealError(
            f"envelope for round {envelope.round} failed authenticated decryption"
        ) from exc
    if len(payload) != 8:
        raise SealError(f"opened payload must be exactly 8 bytes, got {len(payload)}")
    return int.from_bytes(payload, "big")
