import asyncio
import time

import pytest

from nexus.errors import InjectedFailure, NotFound
from nexus.proto import ObjectRef
from nexus.store import (
    ADMIN_COUNTERS,
    ADMIN_FAIL_NEXT_PUTS,
    ADMIN_VERSION,
    AsyncStoreConnection,
    BlockingStoreClient,
    ObjectStore,
    StoreProfile,
    StoreService,
)


def run(coro):
    return asyncio.run(coro)


class TestObjectStore:
    def test_round_trip(self):
        async def body():
            store = ObjectStore()
            await store.put("b", "k", bytes([1, 2, 3]))
            assert await store.get("b", "k") == bytes([1, 2, 3])
        run(body())

    def test_absent_key(self):
        async def body():
            store = ObjectStore()
            with pytest.raises(NotFound):
                await store.get("b", "missing")
        run(body())

    def test_versions_monotonic(self):
        async def body():
            store = ObjectStore()
            assert await store.put("b", "k", b"one") == 1
            assert await store.put("b", "k", b"two") == 2
            assert store.version_of("b", "k") == 2
        run(body())

    def test_fail_next_puts(self):
        async def body():
            store = ObjectStore(StoreProfile(fail_next_puts=1))
            with pytest.raises(InjectedFailure):
                await store.put("b", "k", b"one")
            assert await store.put("b", "k", b"one") == 1
        run(body())

    def test_idempotent_retry_single_object(self):
        async def body():
            store = ObjectStore(StoreProfile(fail_next_puts=1))
            payload = b"same-bytes"
            try:
                await store.put("b", "k", payload)
            except InjectedFailure:
                pass
            version = await store.put("b", "k", payload)
            assert await store.get("b", "k") == payload
            assert version == store.version_of("b", "k") == 1
        run(body())

    def test_service_time_model(self):
        profile = StoreProfile(one_way_latency_us=150_000, bandwidth_bps=600_000_000)
        expected = 0.150 + (1 << 20) * 8 / 600e6
        assert profile.service_s(1 << 20) == pytest.approx(expected)
        assert profile.service_s(1 << 20) == pytest.approx(0.16398, abs=1e-4)

    def test_delay_enforced_within_tolerance(self):
        # 150 ms one-way plus 1 MiB at 600 Mbps: 150 + 13.98 ms, wall clock
        async def body():
            store = ObjectStore(StoreProfile(one_way_latency_us=150_000,
                                             bandwidth_bps=600_000_000))
            expected = 0.16398
            start = time.monotonic()
            await store.put("b", "k", b"x" * (1 << 20))
            elapsed = time.monotonic() - start
            assert 0.9 * expected <= elapsed <= 1.1 * expected
        run(asyncio.wait_for(body(), 5))


@pytest.fixture
def service_addr():
    """A store service running in a background thread's event loop."""
    import threading

    store = ObjectStore(StoreProfile())
    started = threading.Event()
    addr = {}
    loop_holder = {}

    def run_loop():
        async def main():
            service = StoreService(store)
            host, port = await service.start()
            addr["host"], addr["port"] = host, port
            loop_holder["loop"] = asyncio.get_running_loop()
            started.set()
            await asyncio.Event().wait()
        try:
            asyncio.run(main())
        except asyncio.CancelledError:
            pass

    thread = threading.Thread(target=run_loop, daemon=True)
    thread.start()
    assert started.wait(5)
    yield addr["host"], addr["port"], store
    loop = loop_holder["loop"]
    for task in asyncio.all_tasks(loop):
        loop.call_soon_threadsafe(task.cancel)
    thread.join(timeout=5)


class TestService:
    def test_blocking_client_round_trip(self, service_addr):
        host, port, _ = service_addr
        client = BlockingStoreClient(host, port)
        ref = ObjectRef("bkt", "key")
        assert client.put_object(ref, b"payload") == 1
        assert client.get_object(ref) == b"payload"
        with pytest.raises(NotFound):
            client.get_object(ObjectRef("bkt", "absent"))
        client.close()

    def test_admin_ops(self, service_addr):
        host, port, _ = service_addr
        client = BlockingStoreClient(host, port)
        ref = ObjectRef("bkt", "k2")
        client.seed(ref, b"seeded")
        assert client.get_object(ref) == b"seeded"
        assert client.admin(ADMIN_VERSION, {"bucket": "bkt", "key": "k2"}) == {"version": 1}
        client.admin(ADMIN_FAIL_NEXT_PUTS, {"count": 1})
        with pytest.raises(Exception):
            client.put_object(ref, b"will-fail")
        counters = client.admin(ADMIN_COUNTERS, {})
        assert counters["failed_puts"] == 1
        client.close()

    def test_async_connection_header_then_payload(self, service_addr):
        host, port, _ = service_addr

        async def body():
            conn = AsyncStoreConnection(host, port)
            assert await conn.put(ObjectRef("b", "k"), b"0123456789") == 1
            status, length = await conn.get_header(ObjectRef("b", "k"))
            assert status == 0
            assert length == 10
            buf = bytearray(10)
            await conn.recv_payload_into(memoryview(buf))
            assert bytes(buf) == b"0123456789"
            conn.close()
        run(body())

    def test_concurrent_requests_not_serialized(self, service_addr):
        host, port, store = service_addr
        store.profile.one_way_latency_us = 100_000

        async def one(i):
            conn = AsyncStoreConnection(host, port)
            await conn.put(ObjectRef("b", f"k{i}"), b"x")
            conn.close()

        async def body():
            start = time.monotonic()
            await asyncio.gather(*[one(i) for i in range(10)])
            elapsed = time.monotonic() - start
            assert elapsed < 0.5  # 10 x 100 ms would be 1 s if serialized
        run(body())
        store.profile.one_way_latency_us = 0
