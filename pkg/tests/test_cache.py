"""Tests for the content-addressed artifact cache."""

from __future__ import annotations

import asyncio

import numpy as np
import pytest

from perturbex.cache import ArtifactCache, CacheKey, cache_get_or_compute, decode_masks, encode_masks
from perturbex.core import BinaryMask


def _key(seed: int = 42, **params) -> CacheKey:
    return CacheKey.build("inpaint", b"image-bytes", params or {"steps": 100}, seed=seed)


async def test_second_call_is_a_hit(tmp_path):
    cache = ArtifactCache(tmp_path)
    calls = []

    async def produce() -> bytes:
        calls.append(1)
        return b"payload"

    assert await cache.get_or_compute(_key(), produce) == b"payload"
    assert await cache_get_or_compute(cache, _key(), produce) == b"payload"
    assert len(calls) == 1
    assert (cache.hits, cache.misses) == (1, 1)


async def test_entries_survive_a_new_cache_instance(tmp_path):
    async def produce() -> bytes:
        return b"persisted"

    await ArtifactCache(tmp_path).get_or_compute(_key(), produce)
    fresh = ArtifactCache(tmp_path)

    async def fail() -> bytes:
        raise AssertionError("producer should not run")

    assert await fresh.get_or_compute(_key(), fail) == b"persisted"
    assert fresh.hits == 1


def test_key_depends_on_every_field():
    base = _key()
    assert _key() == base
    assert _key(seed=7) != base
    assert _key(steps=50) != base
    assert CacheKey.build("segment", b"image-bytes", {"steps": 100}, seed=42) != base
    assert CacheKey.build("inpaint", b"other", {"steps": 100}, seed=42) != base
    with_mask = CacheKey.build("inpaint", b"image-bytes", {"steps": 100}, seed=42, mask_bytes=b"m")
    assert with_mask != base


def test_key_ignores_param_order():
    a = CacheKey.build("inpaint", b"x", {"a": 1, "b": 2})
    b = CacheKey.build("inpaint", b"x", {"b": 2, "a": 1})
    assert a == b
    assert len(str(a)) == 64


async def test_concurrent_callers_share_one_computation(tmp_path):
    cache = ArtifactCache(tmp_path)
    calls = []

    async def produce() -> bytes:
        calls.append(1)
        await asyncio.sleep(0.01)
        return b"shared"

    results = await asyncio.gather(*(cache.get_or_compute(_key(), produce) for _ in range(32)))
    assert results == [b"shared"] * 32
    assert len(calls) == 1
    assert cache.misses == 1
    assert cache.hits == 31


async def test_key_locks_are_released(tmp_path):
    cache = ArtifactCache(tmp_path)

    async def produce() -> bytes:
        await asyncio.sleep(0.001)
        return b"x"

    keys = [_key(seed=s) for s in range(50)]
    await asyncio.gather(*(cache.get_or_compute(k, produce) for k in keys for _ in range(3)))
    assert cache._locks == {}
    assert cache._waiters == {}

    async def fail() -> bytes:
        raise RuntimeError("producer failed")

    with pytest.raises(RuntimeError):
        await cache.get_or_compute(_key(seed=999), fail)
    assert cache._locks == {}


async def test_corrupt_entry_is_recomputed(tmp_path, caplog):
    cache = ArtifactCache(tmp_path)
    key = _key()

    async def produce() -> bytes:
        return b"good bytes"

    await cache.get_or_compute(key, produce)
    path = cache.path_for(key)
    path.write_bytes(path.read_bytes()[:-3] + b"bad")

    calls = []

    async def reproduce() -> bytes:
        calls.append(1)
        return b"good bytes"

    assert await cache.get_or_compute(key, reproduce) == b"good bytes"
    assert calls == [1]
    assert "corrupt" in caplog.text
    assert await cache.get_or_compute(key, reproduce) == b"good bytes"
    assert calls == [1]


async def test_no_temp_files_left_behind(tmp_path):
    cache = ArtifactCache(tmp_path)

    async def produce() -> bytes:
        return b"x" * 1000

    await cache.get_or_compute(_key(), produce)
    assert not list(tmp_path.rglob(".tmp-*"))
    assert cache.path_for(_key()).parent.name == _key().digest[:2]


def test_masks_pack_and_unpack():
    rng = np.random.default_rng(9)
    masks = [BinaryMask(rng.random((7, 13)) < 0.5) for _ in range(3)]
    assert decode_masks(encode_masks(masks)) == masks
    assert decode_masks(encode_masks([])) == []


async def test_get_or_compute_masks(tmp_path):
    cache = ArtifactCache(tmp_path)
    masks = [BinaryMask.full(4, 3), BinaryMask(np.zeros((3, 4), dtype=bool))]

    async def produce() -> list[BinaryMask]:
        return masks

    assert await cache.get_or_compute_masks(_key(), produce) == masks
    assert await cache.get_or_compute_masks(_key(), produce) == masks
    assert cache.hits == 1
