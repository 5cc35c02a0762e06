"""Content-addressed on-disk cache for expensive intermediate results.

Entries are stored as ``<cache_dir>/<key[:2]>/<key>.bin`` with a SHA-256
checksum header; writes go to a temp file in the same directory and are
renamed into place, so readers never observe a partial entry.
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import logging
import os
import tempfile
from collections.abc import Awaitable, Callable, Mapping, Sequence
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict

from .core import BinaryMask

logger = logging.getLogger(__name__)

_HEADER_LEN = 64


def canonical_params(params: Mapping[str, Any]) -> bytes:
    return json.dumps(params, sort_keys=True, separators=(",", ":"), default=str).encode("utf-8")


class CacheKey(BaseModel):
    """SHA-256 over image bytes, operation kind, canonical params, seed and mask bytes."""

    model_config = ConfigDict(frozen=True)

    digest: str

    @classmethod
    def build(
        cls,
        kind: str,
        image_bytes: bytes,
        params: Mapping[str, Any] | None = None,
        *,
        seed: int | None = None,
        mask_bytes: bytes | None = None,
    ) -> CacheKey:
        h = hashlib.sha256()
        # Length-prefix every field so concatenations cannot collide.
        for part in (
            kind.encode("utf-8"),
            image_bytes,
            canonical_params(params or {}),
            b"" if seed is None else str(seed).encode("ascii"),
            mask_bytes or b"",
        ):
            h.update(len(part).to_bytes(8, "big"))
            h.update(part)
        return cls(digest=h.hexdigest())

    def __str__(self) -> str:
        return self.digest


def encode_masks(masks: Sequence[BinaryMask]) -> bytes:
    """Pack a list of same-size masks: JSON header line, then packed bits."""
    if not masks:
        return json.dumps({"count": 0, "width": 0, "height": 0}).encode("utf-8") + b"\n"
    width, height = masks[0].size
    header = json.dumps({"count": len(masks), "width": width, "height": height}).encode("utf-8")
    stack = np.stack([m.bits for m in masks])
    return header + b"\n" + np.packbits(stack).tobytes()


def decode_masks(data: bytes) -> list[BinaryMask]:
    header, _, body = data.partition(b"\n")
    meta = json.loads(header)
    count, width, height = meta["count"], meta["width"], meta["height"]
    if count == 0:
        return []
    bits = np.unpackbits(np.frombuffer(body, dtype=np.uint8), count=count * width * height)
    stack = bits.reshape(count, height, width).astype(bool)
    return [BinaryMask(stack[i]) for i in range(count)]


class ArtifactCache:
    """Byte-level get-or-compute cache shared by all workers of a run."""

    def __init__(self, cache_dir: str | Path) -> None:
        self.cache_dir = Path(cache_dir)
        self.hits = 0
        self.misses = 0
        self._locks: dict[str, asyncio.Lock] = {}
        self._waiters: dict[str, int] = {}

    def path_for(self, key: CacheKey) -> Path:
        return self.cache_dir / key.digest[:2] / f"{key.digest}.bin"

    def _read(self, key: CacheKey) -> bytes | None:
        path = self.path_for(key)
        try:
            raw = path.read_bytes()
        except FileNotFoundError:
            return None
        checksum, payload = raw[:_HEADER_LEN], raw[_HEADER_LEN:]
        if hashlib.sha256(payload).hexdigest().encode("ascii") != checksum:
            logger.warning("cache entry %s is corrupt; recomputing", path)
            return None
        return payload

    def _write(self, key: CacheKey, payload: bytes) -> None:
        path = self.path_for(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        checksum = hashlib.sha256(payload).hexdigest().encode("ascii")
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".bin")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(checksum + payload)
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise

    async def get_or_compute(
        self, key: CacheKey, producer: Callable[[], Awaitable[bytes]]
    ) -> bytes:
        """Return the cached bytes for ``key``, running ``producer`` at most once per process."""
        digest = key.digest
        lock = self._locks.setdefault(digest, asyncio.Lock())
        self._waiters[digest] = self._waiters.get(digest, 0) + 1
        try:
            async with lock:
                return await self._load_or_produce(key, producer)
        finally:
            self._waiters[digest] -= 1
            if not self._waiters[digest]:
                del self._waiters[digest]
                del self._locks[digest]

    async def _load_or_produce(
        self, key: CacheKey, producer: Callable[[], Awaitable[bytes]]
    ) -> bytes:
        cached = self._read(key)
        if cached is not None:
            self.hits += 1
            logger.debug("cache hit %s", key.digest[:12])
            return cached
        self.misses += 1
        logger.debug("cache miss %s", key.digest[:12])
        payload = await producer()
        self._write(key, payload)
        return payload

    async def get_or_compute_masks(
        self, key: CacheKey, producer: Callable[[], Awaitable[list[BinaryMask]]]
    ) -> list[BinaryMask]:
        async def produce() -> bytes:
            return encode_masks(await producer())

        return decode_masks(await self.get_or_compute(key, produce))


async def cache_get_or_compute(
    cache: ArtifactCache, key: CacheKey, producer: Callable[[], Awaitable[bytes]]
) -> bytes:
    return await cache.get_or_compute(key, producer)
